/** DOM wiring for the annotator workflow.
 *
 * Keyboard-first: A accepts, R rejects, T toggles overlay/plain, L switches
 * to a side-by-side layout, U undoes a not-yet-committed verdict. All state
 * other than the session id lives server-side, so a refresh is lossless. */

import { ApiClient, type CandidateView, type Decision, type FetchLike, type Progress } from "./api.js";
import { AppState } from "./state.js";

export interface MountOptions {
  fetchFn?: FetchLike;
  base?: string;
  session?: string;
  retryDelayMs?: number;
}

export interface App {
  state: AppState;
  api: ApiClient;
  session: string;
  /** resolves when the current fetch/submit settles; tests await this */
  idle(): Promise<void>;
  refresh(): Promise<void>;
}

function el<T extends HTMLElement>(doc: Document, id: string): T {
  const found = doc.getElementById(id);
  if (!found) {
    throw new Error(`missing element #${id}`);
  }
  return found as T;
}

function sessionId(win: Window): string {
  try {
    const existing = win.localStorage.getItem("annotator_id");
    if (existing) {
      return existing;
    }
    const fresh = `ann-${Math.random().toString(36).slice(2, 10)}`;
    win.localStorage.setItem("annotator_id", fresh);
    return fresh;
  } catch {
    return `ann-${Math.random().toString(36).slice(2, 10)}`;
  }
}

export function mount(win: Window, opts: MountOptions = {}): App {
  const doc = win.document;
  const fetchFn: FetchLike = opts.fetchFn ?? ((input, init) => win.fetch(input, init));
  const api = new ApiClient(fetchFn, opts.base ?? "");
  const session = opts.session ?? sessionId(win);
  const retryDelayMs = opts.retryDelayMs ?? 2000;
  const state = new AppState();

  const promptEl = el<HTMLElement>(doc, "prompt");
  const conceptEl = el<HTMLElement>(doc, "concept");
  const suggestionEl = el<HTMLElement>(doc, "ai-suggestion");
  const progressEl = el<HTMLElement>(doc, "progress");
  const bannerEl = el<HTMLElement>(doc, "banner");
  const mainImg = el<HTMLImageElement>(doc, "image-main");
  const sideImg = el<HTMLImageElement>(doc, "image-side");
  const preloadImg = el<HTMLImageElement>(doc, "image-preload");
  const variantEl = el<HTMLElement>(doc, "variant-label");
  const cardEl = el<HTMLElement>(doc, "card");
  const doneEl = el<HTMLElement>(doc, "done");
  const exportLink = el<HTMLAnchorElement>(doc, "export-link");
  const acceptBtn = el<HTMLButtonElement>(doc, "btn-accept");
  const rejectBtn = el<HTMLButtonElement>(doc, "btn-reject");
  const toggleBtn = el<HTMLButtonElement>(doc, "btn-toggle");

  let pendingWork: Promise<void> = Promise.resolve();
  const track = (work: Promise<void>): Promise<void> => {
    pendingWork = pendingWork.then(() => work, () => work);
    return work;
  };

  function renderProgress(progress: Progress): void {
    progressEl.textContent = `${progress.decided} / ${progress.total} decided`;
  }

  function renderBanner(): void {
    bannerEl.textContent = state.banner ?? "";
    bannerEl.hidden = state.banner === null;
  }

  function renderImages(): void {
    const candidate = state.current;
    if (!candidate) {
      return;
    }
    if (state.layout === "side-by-side") {
      mainImg.src = candidate.overlay_url;
      sideImg.src = candidate.plain_url;
      sideImg.hidden = false;
      variantEl.textContent = "overlay | plain";
      return;
    }
    sideImg.hidden = true;
    const url = state.variant === "overlay" ? candidate.overlay_url : candidate.plain_url;
    mainImg.src = url;
    variantEl.textContent = state.variant;
  }

  function render(): void {
    const candidate = state.current;
    cardEl.hidden = state.allDone;
    doneEl.hidden = !state.allDone;
    renderBanner();
    if (!candidate) {
      exportLink.href = api.exportUrl();
      return;
    }
    promptEl.textContent = candidate.prompt;
    conceptEl.textContent = candidate.concept;
    suggestionEl.textContent = `AI suggests: ${candidate.ai_suggestion}`;
    suggestionEl.dataset.suggestion = candidate.ai_suggestion;
    renderProgress(candidate.progress);
    renderImages();
    // preload the other variant so toggling never refetches
    preloadImg.src = state.variant === "overlay" ? candidate.plain_url : candidate.overlay_url;
  }

  async function fetchNext(): Promise<void> {
    try {
      const next = await api.nextCandidate(session);
      state.banner = null;
      state.show(next.candidate);
      renderProgress(next.progress);
    } catch (err) {
      state.banner = `connection problem, retrying: ${String(err)}`;
      renderBanner();
      win.setTimeout(() => void track(fetchNext()), retryDelayMs);
    }
    render();
  }

  async function deliver(candidateId: string, decision: Decision): Promise<void> {
    try {
      const result = await api.submitVerdict(candidateId, decision, session);
      state.inFlight.delete(candidateId);
      if (result.kind === "conflict") {
        state.banner = `candidate was decided elsewhere (${result.detail})`;
      } else if (result.kind === "error") {
        state.banner = `verdict rejected: ${result.detail}`;
      } else {
        renderProgress(result.progress);
      }
      renderBanner();
    } catch (err) {
      // network failure: keep the verdict queued; undo can still cancel it
      state.inFlight.delete(candidateId);
      state.queued = { candidateId, decision };
      state.banner = `verdict queued, retrying: ${String(err)}`;
      renderBanner();
      win.setTimeout(() => void track(retryQueued()), retryDelayMs);
    }
  }

  async function retryQueued(): Promise<void> {
    const queued = state.queued;
    if (!queued) {
      return;
    }
    state.queued = null;
    state.inFlight.add(queued.candidateId);
    await deliver(queued.candidateId, queued.decision);
  }

  function submit(decision: Decision): void {
    const candidate = state.current;
    if (!candidate || !state.canSubmit()) {
      return; // double-submit guard
    }
    state.inFlight.add(candidate.candidate_id);
    const send = deliver(candidate.candidate_id, decision);
    // optimistic advance; the service's lease/idempotence keeps this safe
    void track(send.then(() => fetchNext()));
  }

  function undo(): void {
    const cancelled = state.undoQueued();
    if (cancelled) {
      state.banner = `verdict for ${cancelled.candidateId} cancelled before commit`;
      renderBanner();
      void track(fetchNext());
    }
  }

  function onKey(event: KeyboardEvent): void {
    switch (event.key.toLowerCase()) {
      case "a":
        submit("accept");
        break;
      case "r":
        submit("reject");
        break;
      case "t":
        state.toggleVariant();
        renderImages();
        break;
      case "l":
        state.switchLayout();
        renderImages();
        break;
      case "u":
        undo();
        break;
      default:
        return;
    }
    event.preventDefault();
  }

  win.addEventListener("keydown", onKey as EventListener);
  acceptBtn.addEventListener("click", () => submit("accept"));
  rejectBtn.addEventListener("click", () => submit("reject"));
  toggleBtn.addEventListener("click", () => {
    state.toggleVariant();
    renderImages();
  });

  const first = track(fetchNext());
  return {
    state,
    api,
    session,
    idle: () => pendingWork,
    refresh: () => track(fetchNext()),
  };
}
