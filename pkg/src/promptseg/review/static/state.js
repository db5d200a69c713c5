/** Pure application state: which candidate is shown, which image variant is
 * visible, what is in flight, and what may still be undone.
 *
 * A verdict for a displayed candidate is recorded exactly once: an in-flight
 * set blocks double submission, and an unsent (network-failed) verdict can
 * be cancelled with undo because the service has not committed it yet. */
export class AppState {
    constructor() {
        this.current = null;
        this.allDone = false;
        this.variant = "overlay";
        this.layout = "toggle";
        this.banner = null;
        /** candidate ids whose verdict POST is in flight */
        this.inFlight = new Set();
        /** a network-failed verdict waiting for retry; undo can cancel it */
        this.queued = null;
    }
    show(candidate) {
        this.current = candidate;
        this.allDone = candidate === null;
        this.variant = "overlay";
    }
    toggleVariant() {
        this.variant = this.variant === "overlay" ? "plain" : "overlay";
        return this.variant;
    }
    switchLayout() {
        this.layout = this.layout === "toggle" ? "side-by-side" : "toggle";
        return this.layout;
    }
    /** True when a verdict for the displayed candidate may be sent now. */
    canSubmit() {
        return (this.current !== null &&
            !this.inFlight.has(this.current.candidate_id) &&
            (this.queued === null || this.queued.candidateId !== this.current.candidate_id));
    }
    /** Undo is only possible while the verdict has not reached the service. */
    undoQueued() {
        const cancelled = this.queued;
        this.queued = null;
        return cancelled;
    }
}
