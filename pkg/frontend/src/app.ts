/** Labeling app: shows the two crops of the current pair, posts the
 * labeler's verdicts, and keeps the live precision chart in sync. The
 * server is the single source of truth for every count and every precision
 * value; this module only positions the candidate-threshold marker. */

import { LabelApi } from "./api.js";
import {
  DEFAULT_GEOMETRY,
  nearestPoint,
  renderChart,
  xToThreshold,
} from "./chart.js";
import { bindKeyboard } from "./keyboard.js";
import {
  applyCurve,
  applyLabeledCount,
  applyNext,
  flagCurrent,
  initialState,
  setThreshold,
  type UiState,
} from "./state.js";
import type { CurvePoint } from "./types.js";

const MARKER_STEP = 0.005;
const RETRY_MS = 1500;

export interface AppOptions {
  doc: Document;
  api: LabelApi;
  /** called after every render; tests await on it */
  onRender?: (state: UiState) => void;
}

export class LabelApp {
  state: UiState = initialState();
  private readonly doc: Document;
  readonly api: LabelApi;
  private readonly onRender?: (state: UiState) => void;
  private pendingRetry: number | null = null;
  private unbind: (() => void) | null = null;

  constructor(options: AppOptions) {
    this.doc = options.doc;
    this.api = options.api;
    this.onRender = options.onRender;
  }

  private el<T extends HTMLElement>(id: string): T {
    const node = this.doc.getElementById(id);
    if (!node) {
      throw new Error(`missing #${id} in the document`);
    }
    return node as T;
  }

  async start(): Promise<void> {
    this.unbind = bindKeyboard(this.doc, {
      onMatch: () => void this.submit(true),
      onNoMatch: () => void this.submit(false),
      onFlag: () => this.flag(),
      onMarkerStep: (dir) => this.moveMarker(dir * MARKER_STEP),
    });
    this.el("btn-match").addEventListener("click", () => void this.submit(true));
    this.el("btn-nomatch").addEventListener("click", () => void this.submit(false));
    this.el("btn-flag").addEventListener("click", () => this.flag());
    this.el("btn-commit").addEventListener("click", () => void this.commitThreshold());
    const svg = this.el<HTMLElement>("chart") as unknown as SVGSVGElement;
    svg.addEventListener("pointerdown", (e) => this.dragMarker(e as PointerEvent));
    svg.addEventListener("pointermove", (e) => {
      if ((e as PointerEvent).buttons & 1) {
        this.dragMarker(e as PointerEvent);
      }
    });
    await this.refresh();
  }

  stop(): void {
    this.unbind?.();
    if (this.pendingRetry !== null) {
      clearTimeout(this.pendingRetry);
    }
  }

  /** Pull next pair (and curve once labels exist) from the server. */
  async refresh(): Promise<void> {
    const next = await this.api.next();
    this.state = applyNext(this.state, next);
    if (this.state.labeledCount > 0) {
      this.state = applyCurve(this.state, await this.api.precision());
    }
    this.render();
  }

  async submit(match: boolean): Promise<void> {
    if (this.state.busy || !this.state.pair || this.state.done) {
      return;
    }
    const pairId = this.state.pair.pair_id;
    this.state = { ...this.state, busy: true };
    this.render();
    try {
      const result = await this.api.label(pairId, match);
      if (result.conflict) {
        // someone already recorded this pair: resync, never double count
        const stats = await this.api.stats();
        this.state = applyLabeledCount(this.state, stats.labeled);
      } else if (result.labeled !== null) {
        this.state = applyLabeledCount(this.state, result.labeled);
      }
      this.state = { ...this.state, busy: false };
      await this.refresh();
    } catch {
      // network trouble: keep input locked, retry the same submission
      this.setNote("connection lost, retrying…");
      this.pendingRetry = setTimeout(() => {
        this.pendingRetry = null;
        this.state = { ...this.state, busy: false };
        void this.submit(match);
      }, RETRY_MS) as unknown as number;
    }
  }

  flag(): void {
    const before = this.state.flagged.length;
    this.state = flagCurrent(this.state);
    if (this.state.flagged.length !== before) {
      this.persistFlags();
      this.setNote(`flagged ${this.state.pair?.pair_id} for review`);
      this.render();
    }
  }

  moveMarker(delta: number): void {
    this.state = setThreshold(this.state, this.state.candidateThreshold + delta);
    this.render();
  }

  setMarker(value: number): void {
    this.state = setThreshold(this.state, value);
    this.render();
  }

  private dragMarker(event: PointerEvent): void {
    if (!this.state.curve) {
      return;
    }
    const svg = event.currentTarget as SVGSVGElement;
    const rect = svg.getBoundingClientRect();
    const scale = rect.width > 0 ? DEFAULT_GEOMETRY.width / rect.width : 1;
    const x = (event.clientX - rect.left) * scale;
    this.setMarker(xToThreshold(this.state.curve, DEFAULT_GEOMETRY, x));
  }

  async commitThreshold(): Promise<void> {
    await this.api.commitThreshold(this.state.candidateThreshold);
    this.setNote(`threshold ${this.state.candidateThreshold.toFixed(3)} committed`);
  }

  /** Readout of the server curve at the marker; no server round-trip. */
  readoutAtMarker(): CurvePoint | null {
    if (!this.state.curve) {
      return null;
    }
    return nearestPoint(this.state.curve, this.state.candidateThreshold);
  }

  private persistFlags(): void {
    try {
      this.doc.defaultView?.localStorage.setItem(
        `forge-flags-${this.api.sessionId}`,
        JSON.stringify(this.state.flagged),
      );
    } catch {
      // storage unavailable: flags stay in memory
    }
  }

  private setNote(text: string): void {
    this.el("note").textContent = text;
  }

  private render(): void {
    const s = this.state;
    this.el("counter").textContent = `${s.labeledCount}/${s.total}`;
    const labeling = this.el("labeling");
    const completion = this.el("completion");

    if (s.done) {
      labeling.hidden = true;
      completion.hidden = false;
      const link = this.el<HTMLAnchorElement>("export-link");
      link.href = this.api.labelsUrl();
      this.el("flagged-list").textContent = s.flagged.length
        ? `flagged for review: ${s.flagged.join(", ")}`
        : "nothing flagged for review";
    } else if (s.pair) {
      labeling.hidden = false;
      completion.hidden = true;
      this.el("similarity").textContent = s.pair.similarity.toFixed(3);
      this.setCrop("crop-a", this.api.cropUrl(s.pair.crop_a));
      this.setCrop("crop-b", this.api.cropUrl(s.pair.crop_b));
      for (const id of ["btn-match", "btn-nomatch"]) {
        this.el<HTMLButtonElement>(id).disabled = s.busy;
      }
    }

    if (s.curve) {
      const svg = this.el<HTMLElement>("chart") as unknown as SVGSVGElement;
      const snapped = renderChart(svg, s.curve, s.candidateThreshold);
      const readout = this.el("readout");
      if (snapped.precision === null) {
        readout.textContent = `t=${s.candidateThreshold.toFixed(3)}: no labeled pairs at or above`;
      } else {
        readout.textContent =
          `t=${snapped.threshold.toFixed(3)}: precision ${snapped.precision.toFixed(3)} ` +
          `(${snapped.support} pairs)`;
      }
    }
    this.onRender?.(s);
  }

  private setCrop(id: string, url: string): void {
    const img = this.el<HTMLImageElement>(id);
    const holder = img.parentElement as HTMLElement;
    holder.classList.remove("failed");
    img.onerror = () => {
      holder.classList.add("failed");
      const retry = holder.querySelector<HTMLButtonElement>(".retry");
      if (retry) {
        retry.onclick = () => {
          holder.classList.remove("failed");
          img.src = `${url}${url.includes("?") ? "&" : "?"}retry=${Date.now()}`;
        };
      }
    };
    img.src = url;
  }
}

export async function initApp(options: AppOptions): Promise<LabelApp> {
  const app = new LabelApp(options);
  await app.start();
  return app;
}
