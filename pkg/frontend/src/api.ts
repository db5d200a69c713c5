/** Typed client for the review service HTTP API. */

export type Decision = "accept" | "reject";

export interface Progress {
  total: number;
  decided: number;
  assigned: number;
  pending: number;
  accepted: number;
  rejected: number;
}

export interface CandidateView {
  candidate_id: string;
  prompt: string;
  concept: string;
  ai_suggestion: Decision;
  overlay_url: string;
  plain_url: string;
  progress: Progress;
}

export interface NextResponse {
  candidate: CandidateView | null;
  progress: Progress;
}

export type SubmitResult =
  | { kind: "ok"; progress: Progress }
  | { kind: "conflict"; detail: string }
  | { kind: "error"; detail: string };

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(private readonly fetchFn: FetchLike, private readonly base: string = "") {}

  private url(path: string): string {
    return this.base + path;
  }

  async nextCandidate(session: string): Promise<NextResponse> {
    const resp = await this.fetchFn(this.url(`/api/candidates/next?session=${encodeURIComponent(session)}`));
    if (!resp.ok) {
      throw new Error(`next candidate failed: HTTP ${resp.status}`);
    }
    return (await resp.json()) as NextResponse;
  }

  /** Network failures throw; HTTP-level rejections return a typed result. */
  async submitVerdict(candidateId: string, decision: Decision, annotatorId: string): Promise<SubmitResult> {
    const resp = await this.fetchFn(this.url("/api/verdicts"), {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ candidate_id: candidateId, decision, annotator_id: annotatorId }),
    });
    if (resp.status === 409) {
      const body = (await resp.json()) as { detail?: string };
      return { kind: "conflict", detail: body.detail ?? "decided elsewhere" };
    }
    if (!resp.ok) {
      const text = await resp.text();
      return { kind: "error", detail: `HTTP ${resp.status}: ${text}` };
    }
    const body = (await resp.json()) as { progress: Progress };
    return { kind: "ok", progress: body.progress };
  }

  exportUrl(): string {
    return this.url("/api/export");
  }
}
