/** Thin typed client for the label-service endpoints. The UI never derives
 * precision or counts itself; every number shown comes from these calls. */

import type {
  FetchFn,
  LabelAck,
  NextResponse,
  PrecisionCurve,
  SessionStats,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    readonly status: number,
    message: string,
  ) {
    super(message);
  }
}

export interface LabelResult {
  ok: boolean;
  conflict: boolean;
  labeled: number | null;
}

export class LabelApi {
  constructor(
    private readonly baseUrl: string,
    readonly sessionId: string,
    private readonly fetchFn: FetchFn = (input, init) => fetch(input, init),
  ) {}

  private sessionPath(suffix: string): string {
    return `${this.baseUrl}/api/session/${this.sessionId}${suffix}`;
  }

  private async getJson<T>(url: string): Promise<T> {
    const resp = await this.fetchFn(url);
    if (!resp.ok) {
      throw new ApiError(resp.status, `GET ${url} -> ${resp.status}`);
    }
    return (await resp.json()) as T;
  }

  next(): Promise<NextResponse> {
    return this.getJson<NextResponse>(this.sessionPath("/next"));
  }

  stats(): Promise<SessionStats> {
    return this.getJson<SessionStats>(this.sessionPath("/stats"));
  }

  precision(step = 0.005): Promise<PrecisionCurve> {
    return this.getJson<PrecisionCurve>(this.sessionPath(`/precision?step=${step}`));
  }

  /** 409 (already labeled) is reported, not thrown: the UI resyncs on it. */
  async label(pairId: string, match: boolean): Promise<LabelResult> {
    const resp = await this.fetchFn(this.sessionPath("/label"), {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ pair_id: pairId, match }),
    });
    if (resp.status === 409) {
      return { ok: false, conflict: true, labeled: null };
    }
    if (!resp.ok) {
      throw new ApiError(resp.status, `label ${pairId} -> ${resp.status}`);
    }
    const ack = (await resp.json()) as LabelAck;
    return { ok: true, conflict: false, labeled: ack.labeled };
  }

  async commitThreshold(value: number): Promise<void> {
    const resp = await this.fetchFn(this.sessionPath("/threshold"), {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ value }),
    });
    if (!resp.ok) {
      throw new ApiError(resp.status, `threshold -> ${resp.status}`);
    }
  }

  labelsUrl(): string {
    return this.sessionPath("/labels");
  }

  cropUrl(path: string): string {
    return `${this.baseUrl}${path}`;
  }
}

export async function firstSessionId(
  baseUrl: string,
  fetchFn: FetchFn = (input, init) => fetch(input, init),
): Promise<string> {
  const resp = await fetchFn(`${baseUrl}/api/sessions`);
  if (!resp.ok) {
    throw new ApiError(resp.status, "cannot list sessions");
  }
  const sessions = (await resp.json()) as SessionStats[];
  if (!sessions.length) {
    throw new ApiError(404, "no sessions on the server");
  }
  return sessions[0].session_id;
}
