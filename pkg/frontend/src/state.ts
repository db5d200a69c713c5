/** Pure application state: which candidate is shown, which image variant is
 * visible, what is in flight, and what may still be undone.
 *
 * A verdict for a displayed candidate is recorded exactly once: an in-flight
 * set blocks double submission, and an unsent (network-failed) verdict can
 * be cancelled with undo because the service has not committed it yet. */

import type { CandidateView, Decision } from "./api.js";

export type Variant = "overlay" | "plain";
export type Layout = "toggle" | "side-by-side";

export interface QueuedVerdict {
  candidateId: string;
  decision: Decision;
}

export class AppState {
  current: CandidateView | null = null;
  allDone = false;
  variant: Variant = "overlay";
  layout: Layout = "toggle";
  banner: string | null = null;
  /** candidate ids whose verdict POST is in flight */
  readonly inFlight = new Set<string>();
  /** a network-failed verdict waiting for retry; undo can cancel it */
  queued: QueuedVerdict | null = null;

  show(candidate: CandidateView | null): void {
    this.current = candidate;
    this.allDone = candidate === null;
    this.variant = "overlay";
  }

  toggleVariant(): Variant {
    this.variant = this.variant === "overlay" ? "plain" : "overlay";
    return this.variant;
  }

  switchLayout(): Layout {
    this.layout = this.layout === "toggle" ? "side-by-side" : "toggle";
    return this.layout;
  }

  /** True when a verdict for the displayed candidate may be sent now. */
  canSubmit(): boolean {
    return (
      this.current !== null &&
      !this.inFlight.has(this.current.candidate_id) &&
      (this.queued === null || this.queued.candidateId !== this.current.candidate_id)
    );
  }

  /** Undo is only possible while the verdict has not reached the service. */
  undoQueued(): QueuedVerdict | null {
    const cancelled = this.queued;
    this.queued = null;
    return cancelled;
  }
}
