// Thin client for the transfer service JSON API.

import { Mode, Role } from './modes.js';

export interface TransferResponse {
  request_id: string;
  mode: Mode;
  image: string; // base64 PNG
  timings: Record<string, number>;
  resized: Record<string, boolean>;
  artifacts: Record<string, string>;
}

export interface ApiError {
  status: number;
  message: string;
  missing?: Role;
}

export class TransferClient {
  constructor(private baseUrl = '', private fetchFn: typeof fetch = fetch.bind(globalThis)) {}

  async health(): Promise<{ status: string; fingerprint?: string }> {
    const resp = await this.fetchFn(`${this.baseUrl}/api/health`);
    return resp.json();
  }

  async transfer(mode: Mode, files: Partial<Record<Role, Blob>>): Promise<TransferResponse> {
    const form = new FormData();
    form.set('mode', mode);
    for (const role of ['face', 'shape', 'color'] as Role[]) {
      const blob = files[role];
      if (blob) form.set(role, blob, `${role}.png`);
    }
    const resp = await this.fetchFn(`${this.baseUrl}/api/transfer`, { method: 'POST', body: form });
    if (!resp.ok) {
      let message = `transfer failed (${resp.status})`;
      let missing: Role | undefined;
      try {
        const body = await resp.json();
        message = body.error ?? message;
        missing = body.missing;
      } catch {
        // non-JSON error body
      }
      throw { status: resp.status, message, missing } satisfies ApiError;
    }
    return resp.json();
  }
}

export function pngDataUrl(base64: string): string {
  return `data:image/png;base64,${base64}`;
}
