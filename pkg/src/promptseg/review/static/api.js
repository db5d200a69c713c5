/** Typed client for the review service HTTP API. */
export class ApiClient {
    constructor(fetchFn, base = "") {
        this.fetchFn = fetchFn;
        this.base = base;
    }
    url(path) {
        return this.base + path;
    }
    async nextCandidate(session) {
        const resp = await this.fetchFn(this.url(`/api/candidates/next?session=${encodeURIComponent(session)}`));
        if (!resp.ok) {
            throw new Error(`next candidate failed: HTTP ${resp.status}`);
        }
        return (await resp.json());
    }
    /** Network failures throw; HTTP-level rejections return a typed result. */
    async submitVerdict(candidateId, decision, annotatorId) {
        const resp = await this.fetchFn(this.url("/api/verdicts"), {
            method: "POST",
            headers: { "content-type": "application/json" },
            body: JSON.stringify({ candidate_id: candidateId, decision, annotator_id: annotatorId }),
        });
        if (resp.status === 409) {
            const body = (await resp.json());
            return { kind: "conflict", detail: body.detail ?? "decided elsewhere" };
        }
        if (!resp.ok) {
            const text = await resp.text();
            return { kind: "error", detail: `HTTP ${resp.status}: ${text}` };
        }
        const body = (await resp.json());
        return { kind: "ok", progress: body.progress };
    }
    exportUrl() {
        return this.url("/api/export");
    }
}
