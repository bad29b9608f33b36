/** Client-side mirror of the session state. Counts come from server acks
 * and stats snapshots; the only purely client-side data is the candidate
 * threshold position and the flagged-for-review list. */

import type { NextResponse, PairCard, PrecisionCurve } from "./types.js";

export interface UiState {
  pair: PairCard | null;
  done: boolean;
  labeledCount: number;
  total: number;
  curve: PrecisionCurve | null;
  candidateThreshold: number;
  busy: boolean;
  flagged: string[];
}

export const DEFAULT_THRESHOLD = 0.93;

export function initialState(): UiState {
  return {
    pair: null,
    done: false,
    labeledCount: 0,
    total: 0,
    curve: null,
    candidateThreshold: DEFAULT_THRESHOLD,
    busy: false,
    flagged: [],
  };
}

export function applyNext(state: UiState, resp: NextResponse): UiState {
  const pair = resp.done
    ? null
    : {
        pair_id: resp.pair_id!,
        a: resp.a!,
        b: resp.b!,
        similarity: resp.similarity!,
        crop_a: resp.crop_a!,
        crop_b: resp.crop_b!,
      };
  return {
    ...state,
    pair,
    done: resp.done,
    labeledCount: Math.min(resp.labeled, resp.total),
    total: resp.total,
  };
}

export function applyCurve(state: UiState, curve: PrecisionCurve): UiState {
  return { ...state, curve, candidateThreshold: clampToCurve(curve, state.candidateThreshold) };
}

export function applyLabeledCount(state: UiState, labeled: number): UiState {
  return { ...state, labeledCount: Math.min(labeled, state.total || labeled) };
}

export function setThreshold(state: UiState, value: number): UiState {
  return {
    ...state,
    candidateThreshold: state.curve ? clampToCurve(state.curve, value) : value,
  };
}

export function flagCurrent(state: UiState): UiState {
  if (!state.pair || state.flagged.includes(state.pair.pair_id)) {
    return state;
  }
  return { ...state, flagged: [...state.flagged, state.pair.pair_id] };
}

/** The marker never leaves the curve's threshold domain. */
export function clampToCurve(curve: PrecisionCurve, value: number): number {
  if (!curve.points.length) {
    return value;
  }
  const lo = curve.points[0].threshold;
  const hi = curve.points[curve.points.length - 1].threshold;
  return Math.min(hi, Math.max(lo, value));
}
