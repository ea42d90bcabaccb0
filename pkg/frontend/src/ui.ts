// DOM layer: upload slots, mode switch, run/busy state, result panel with
// the stage-latency bar, history strip and the compare panel.

import { ApiError, TransferClient, pngDataUrl } from './api.js';
import { buildCompare, CompareView } from './compare.js';
import { MODES, MODE_LABELS, Mode, Role, hiddenRoles, requiredRoles, timingSegments, validateInputs } from './modes.js';
import { Attempt, Session } from './state.js';

const STAGE_COLORS: Record<string, string> = {
  embed: '#7b8cde', pose: '#58b4ae', shape: '#e3a857', color: '#d4719e', refine: '#8ac272',
};

export class App {
  private files: Partial<Record<Role, Blob>> = {};
  private thumbs: Partial<Record<Role, string>> = {};
  private mode: Mode = 'both';
  private compareIds: number[] = [];

  constructor(
    private root: HTMLElement,
    private session: Session,
    private client: TransferClient,
  ) {}

  mount(): void {
    this.root.innerHTML = `
      <header><h1>Hair try-on</h1><span id="health"></span></header>
      <section class="inputs">
        <div id="slots"></div>
        <div class="controls">
          <select id="mode"></select>
          <button id="run">Transfer</button>
          <span id="busy" hidden>running…</span>
          <div id="error" class="error" hidden></div>
        </div>
      </section>
      <section class="result" id="result" hidden>
        <div class="panes" id="result-panes"></div>
        <div class="timing" id="timing"></div>
      </section>
      <section class="history"><h2>Attempts</h2><div id="strip"></div></section>
      <section class="compare"><h2>Compare</h2><div id="compare-panel"></div></section>
    `;
    const modeSel = this.query<HTMLSelectElement>('#mode');
    for (const mode of MODES) {
      const opt = document.createElement('option');
      opt.value = mode;
      opt.textContent = MODE_LABELS[mode];
      modeSel.appendChild(opt);
    }
    modeSel.value = this.mode;
    modeSel.addEventListener('change', () => {
      this.mode = modeSel.value as Mode;
      this.renderSlots();
    });
    this.query('#run').addEventListener('click', () => void this.submit());
    this.renderSlots();
    this.renderHistory();
    void this.client.health().then((h) => {
      this.query('#health').textContent = h.status === 'ok' ? `model ${h.fingerprint}` : 'no checkpoint loaded';
    }).catch(() => {
      this.query('#health').textContent = 'service unreachable';
    });
  }

  private query<T extends HTMLElement = HTMLElement>(sel: string): T {
    const el = this.root.querySelector(sel);
    if (!el) throw new Error(`missing element ${sel}`);
    return el as T;
  }

  private renderSlots(): void {
    const host = this.query('#slots');
    host.innerHTML = '';
    const hidden = hiddenRoles(this.mode);
    for (const role of ['face', 'shape', 'color'] as Role[]) {
      if (hidden.includes(role)) continue;
      const slot = document.createElement('label');
      slot.className = 'slot';
      slot.dataset.role = role;
      const required = requiredRoles(this.mode).includes(role);
      slot.innerHTML = `
        <span class="slot-name">${role}${required ? ' *' : ''}</span>
        <img class="thumb" alt="${role} preview" ${this.thumbs[role] ? `src="${this.thumbs[role]}"` : 'hidden'}>
        <input type="file" accept="image/*" data-role="${role}">
      `;
      slot.querySelector('input')!.addEventListener('change', (ev) => {
        const input = ev.target as HTMLInputElement;
        const file = input.files?.[0];
        if (file) void this.setFile(role, file);
      });
      host.appendChild(slot);
    }
  }

  private async setFile(role: Role, file: Blob): Promise<void> {
    this.files[role] = file;
    this.thumbs[role] = await blobToDataUrl(file);
    this.renderSlots();
  }

  private async submit(): Promise<void> {
    const error = this.query('#error');
    error.hidden = true;
    const present = Object.fromEntries(Object.keys(this.files).map((k) => [k, true]));
    const check = validateInputs(this.mode, present);
    if (!check.ok) {
      this.showError(`missing image: ${check.missing.join(', ')}`);
      return;
    }
    if (!this.session.begin()) {
      this.showError('a transfer is already running; wait for it to finish');
      return;
    }
    const busy = this.query('#busy');
    busy.hidden = false;
    try {
      const visible = requiredRoles(this.mode);
      const payload: Partial<Record<Role, Blob>> = {};
      for (const role of visible) payload[role] = this.files[role];
      const resp = await this.client.transfer(this.mode, payload);
      const attempt = this.session.record({
        requestId: resp.request_id,
        mode: this.mode,
        inputs: Object.fromEntries(visible.map((r) => [r, this.thumbs[r] ?? ''])),
        result: pngDataUrl(resp.image),
        timings: resp.timings,
      });
      this.renderResult(attempt);
      this.renderHistory();
    } catch (err) {
      const apiErr = err as ApiError;
      this.showError(apiErr.missing ? `server rejected: missing ${apiErr.missing}` : apiErr.message ?? String(err));
    } finally {
      this.session.end();
      busy.hidden = true;
    }
  }

  private showError(message: string): void {
    const el = this.query('#error');
    el.textContent = message;
    el.hidden = false;
  }

  private renderResult(attempt: Attempt): void {
    this.query('#result').hidden = false;
    const panes = this.query('#result-panes');
    panes.innerHTML = '';
    for (const [role, src] of Object.entries(attempt.inputs)) {
      panes.appendChild(pane(role, src));
    }
    panes.appendChild(pane('result', attempt.result));
    this.renderTimings(attempt.timings);
  }

  private renderTimings(timings: Record<string, number>): void {
    const bar = this.query('#timing');
    bar.innerHTML = '';
    for (const seg of timingSegments(timings)) {
      const div = document.createElement('div');
      div.className = 'segment';
      div.dataset.stage = seg.stage;
      div.style.width = `${Math.max(2, seg.fraction * 100)}%`;
      div.style.background = STAGE_COLORS[seg.stage] ?? '#999';
      div.title = `${seg.stage}: ${(seg.seconds * 1000).toFixed(0)} ms`;
      div.textContent = seg.stage;
      bar.appendChild(div);
    }
  }

  private renderHistory(): void {
    const strip = this.query('#strip');
    strip.innerHTML = '';
    for (const attempt of this.session.visible()) {
      const card = document.createElement('div');
      card.className = 'card';
      card.innerHTML = `
        <img src="${attempt.result}" alt="attempt ${attempt.id}">
        <div class="card-row">
          <span>#${attempt.id} ${attempt.mode}</span>
          <button data-act="rerun">re-run</button>
          <button data-act="compare">compare</button>
          <button data-act="delete">del</button>
        </div>
      `;
      card.querySelector('[data-act="rerun"]')!.addEventListener('click', () => void this.rerun(attempt));
      card.querySelector('[data-act="compare"]')!.addEventListener('click', () => this.pickForCompare(attempt.id));
      card.querySelector('[data-act="delete"]')!.addEventListener('click', () => {
        this.session.markDeleted(attempt.id);
        this.renderHistory();
        this.renderCompare();
      });
      strip.appendChild(card);
    }
  }

  private async rerun(attempt: Attempt): Promise<void> {
    // attempts are re-runnable: same inputs, same mode; determinism means
    // the service returns the identical image
    if (!this.session.begin()) {
      this.showError('a transfer is already running; wait for it to finish');
      return;
    }
    this.query('#busy').hidden = false;
    try {
      const blobs: Partial<Record<Role, Blob>> = {};
      for (const [role, dataUrl] of Object.entries(attempt.inputs)) {
        if (dataUrl) blobs[role as Role] = dataUrlToBlob(dataUrl);
      }
      const resp = await this.client.transfer(attempt.mode, blobs);
      const rerun = this.session.record({
        requestId: resp.request_id,
        mode: attempt.mode,
        inputs: attempt.inputs,
        result: pngDataUrl(resp.image),
        timings: resp.timings,
      });
      this.renderResult(rerun);
      this.renderHistory();
      this.compareIds = [attempt.id, rerun.id];
      this.renderCompare();
    } catch (err) {
      this.showError((err as ApiError).message ?? String(err));
    } finally {
      this.session.end();
      this.query('#busy').hidden = true;
    }
  }

  private pickForCompare(id: number): void {
    this.compareIds = [...this.compareIds.slice(-1), id];
    this.renderCompare();
  }

  private renderCompare(): void {
    const panel = this.query('#compare-panel');
    const [a, b] = this.compareIds;
    const view: CompareView = buildCompare(this.session.get(a), this.session.get(b));
    panel.innerHTML = '';
    if (view.disabled) {
      panel.innerHTML = `<p class="muted">${view.reason}</p>`;
      return;
    }
    const row = document.createElement('div');
    row.className = 'panes';
    row.appendChild(pane(`#${view.left!.id}`, view.left!.result));
    row.appendChild(pane(`#${view.right!.id}`, view.right!.result));
    panel.appendChild(row);
    const verdict = document.createElement('p');
    verdict.id = 'compare-verdict';
    verdict.textContent = view.identical
      ? 'results are byte-identical (zero difference)'
      : 'results differ';
    panel.appendChild(verdict);
  }
}

function pane(label: string, src: string): HTMLElement {
  const div = document.createElement('div');
  div.className = 'pane';
  div.innerHTML = `<img src="${src}" alt="${label}"><span>${label}</span>`;
  return div;
}

async function blobToDataUrl(blob: Blob): Promise<string> {
  return new Promise((resolve, reject) => {
    const reader = new FileReader();
    reader.onload = () => resolve(reader.result as string);
    reader.onerror = () => reject(reader.error);
    reader.readAsDataURL(blob);
  });
}

function dataUrlToBlob(dataUrl: string): Blob {
  const [head, body] = dataUrl.split(',');
  const mime = head.match(/data:(.*?);/)?.[1] ?? 'image/png';
  const bytes = atob(body);
  const arr = new Uint8Array(bytes.length);
  for (let i = 0; i < bytes.length; i++) arr[i] = bytes.charCodeAt(i);
  return new Blob([arr], { type: mime });
}
