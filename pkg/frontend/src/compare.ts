// Attempt comparison view model: pure logic, rendered by ui.ts.

import { Attempt } from './state.js';

export interface CompareView {
  disabled: boolean;
  reason?: string;
  left?: Attempt;
  right?: Attempt;
  identical: boolean;
}

export function buildCompare(a: Attempt | undefined, b: Attempt | undefined): CompareView {
  if (!a || !b) {
    return { disabled: true, reason: 'pick two attempts to compare', identical: false };
  }
  if (a.deleted || b.deleted) {
    return { disabled: true, reason: 'a compared attempt was deleted', identical: false, left: a, right: b };
  }
  return {
    disabled: false,
    left: a,
    right: b,
    // byte-identical rendered results (data URLs carry the PNG bytes)
    identical: a.result === b.result,
  };
}

/** Swapping the order mirrors the layout. */
export function swapped(view: CompareView): CompareView {
  return { ...view, left: view.right, right: view.left };
}
