/** JSON shapes of the label-service HTTP API. */

export interface PairCard {
  pair_id: string;
  a: number;
  b: number;
  similarity: number;
  crop_a: string;
  crop_b: string;
}

export interface NextResponse extends Partial<PairCard> {
  done: boolean;
  labeled: number;
  total: number;
}

export interface CurvePoint {
  threshold: number;
  precision: number | null;
  support: number;
}

export interface PrecisionCurve {
  points: CurvePoint[];
}

export interface SessionStats {
  session_id: string;
  total: number;
  labeled: number;
  remaining: number;
  matches: number;
  non_matches: number;
  threshold: number | null;
}

export interface LabelAck {
  ok: boolean;
  labeled: number;
}

export type FetchFn = (input: string, init?: RequestInit) => Promise<Response>;
