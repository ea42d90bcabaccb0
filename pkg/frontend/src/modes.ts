// Transfer modes and their input rules. Mirrors the server contract so an
// invalid request never leaves the browser.

export type Mode = 'full' | 'both' | 'shape' | 'color';
export type Role = 'face' | 'shape' | 'color';

export const MODES: Mode[] = ['full', 'both', 'shape', 'color'];

export const MODE_LABELS: Record<Mode, string> = {
  full: 'Shape + color from two references',
  both: 'Shape + color from one reference',
  shape: 'Shape only',
  color: 'Color only',
};

/** Roles the server requires for a mode. */
export function requiredRoles(mode: Mode): Role[] {
  switch (mode) {
    case 'full':
      return ['face', 'shape', 'color'];
    case 'both':
      return ['face', 'shape'];
    case 'shape':
      return ['face', 'shape'];
    case 'color':
      return ['face', 'color'];
  }
}

/** Upload slots that make no sense for a mode and are hidden in the UI. */
export function hiddenRoles(mode: Mode): Role[] {
  switch (mode) {
    case 'full':
      return [];
    case 'both':
      return ['color']; // the shape image doubles as the color reference
    case 'shape':
      return ['color']; // original color is kept
    case 'color':
      return ['shape'];
  }
}

export interface ValidationResult {
  ok: boolean;
  missing: Role[];
}

/** Client-side mirror of the server's request preconditions. */
export function validateInputs(mode: Mode, present: Partial<Record<Role, boolean>>): ValidationResult {
  const missing = requiredRoles(mode).filter((role) => !present[role]);
  return { ok: missing.length === 0, missing };
}

// Stage order used when rendering latency bars.
export const STAGE_ORDER = ['embed', 'pose', 'shape', 'color', 'refine'] as const;
export type Stage = (typeof STAGE_ORDER)[number];

export interface TimingSegment {
  stage: Stage;
  seconds: number;
  fraction: number; // of the total
}

/** Ordered latency segments; stages the server skipped never appear. */
export function timingSegments(timings: Record<string, number>): TimingSegment[] {
  const present = STAGE_ORDER.filter((s) => timings[s] !== undefined);
  const total = present.reduce((acc, s) => acc + timings[s], 0);
  return present.map((stage) => ({
    stage,
    seconds: timings[stage],
    fraction: total > 0 ? timings[stage] / total : 0,
  }));
}
