// Session state: the attempt history strip and the single-flight guard.
// History is append-only (deletion tombstones an attempt so compare panels
// referencing it disable rather than dangle) and survives reloads through
// injected storage.

import { Mode, Role } from './modes.js';

export interface Attempt {
  id: number;
  requestId: string;
  mode: Mode;
  inputs: Partial<Record<Role, string>>; // thumbnail data URLs
  result: string; // result image data URL
  timings: Record<string, number>;
  timestamp: number;
  deleted?: boolean;
}

export interface StorageLike {
  getItem(key: string): string | null;
  setItem(key: string, value: string): void;
}

const STORAGE_KEY = 'hairfast.attempts.v1';

export class Session {
  attempts: Attempt[] = [];
  private inFlight = false;
  private nextId = 1;

  constructor(private storage?: StorageLike) {
    this.restore();
  }

  get busy(): boolean {
    return this.inFlight;
  }

  /** Claims the single transfer slot; false means a run is in progress. */
  begin(): boolean {
    if (this.inFlight) return false;
    this.inFlight = true;
    return true;
  }

  end(): void {
    this.inFlight = false;
  }

  record(attempt: Omit<Attempt, 'id' | 'timestamp'>): Attempt {
    const full: Attempt = { ...attempt, id: this.nextId++, timestamp: Date.now() };
    this.attempts.push(full);
    this.persist();
    return full;
  }

  get(id: number): Attempt | undefined {
    return this.attempts.find((a) => a.id === id);
  }

  /** Tombstone: the strip stays append-only, panels referencing it disable. */
  markDeleted(id: number): void {
    const attempt = this.get(id);
    if (attempt) {
      attempt.deleted = true;
      this.persist();
    }
  }

  visible(): Attempt[] {
    return this.attempts.filter((a) => !a.deleted);
  }

  private persist(): void {
    if (!this.storage) return;
    this.storage.setItem(STORAGE_KEY, JSON.stringify({ attempts: this.attempts, nextId: this.nextId }));
  }

  private restore(): void {
    if (!this.storage) return;
    const raw = this.storage.getItem(STORAGE_KEY);
    if (!raw) return;
    try {
      const parsed = JSON.parse(raw);
      this.attempts = parsed.attempts ?? [];
      this.nextId = parsed.nextId ?? this.attempts.length + 1;
    } catch {
      this.attempts = [];
    }
  }
}
