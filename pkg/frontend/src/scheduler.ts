/** Debounced single-flight render channel.
 *
 * Control changes funnel through request(); a trailing-edge debounce
 * collapses bursts, at most one fetch is in flight, and a change arriving
 * mid-flight marks the channel dirty so the latest parameters go out as
 * soon as the active render returns. Responses carry sequence tags; only
 * the newest ever reaches the callback, so the preview can never be
 * overwritten by a stale frame.
 */

export interface RenderResult {
  blob: Blob;
  millis: number;
}

export type SendFn<R> = (request: R) => Promise<RenderResult>;

interface Timer {
  setTimeout(fn: () => void, ms: number): unknown;
  clearTimeout(handle: unknown): void;
}

export type SchedulerState = "idle" | "pending" | "pending-dirty";

export class RenderScheduler<R> {
  private latest: R | null = null;
  private timerHandle: unknown = null;
  private inFlight = false;
  private dirty = false;
  private seq = 0;
  private shownSeq = 0;
  sent = 0; // total requests dispatched (observable for tests/diagnostics)

  constructor(
    private send: SendFn<R>,
    private onResult: (result: RenderResult, request: R) => void,
    private onError: (err: unknown) => void = () => undefined,
    private debounceMs = 150,
    private timer: Timer = {
      setTimeout: (fn, ms) => setTimeout(fn, ms),
      clearTimeout: (h) => clearTimeout(h as Parameters<typeof clearTimeout>[0]),
    },
  ) {}

  get state(): SchedulerState {
    if (!this.inFlight) return "idle";
    return this.dirty ? "pending-dirty" : "pending";
  }

  /** Queue the newest request, restarting the trailing debounce window. */
  request(req: R): void {
    this.latest = req;
    if (this.timerHandle !== null) {
      this.timer.clearTimeout(this.timerHandle);
    }
    this.timerHandle = this.timer.setTimeout(() => {
      this.timerHandle = null;
      this.fire();
    }, this.debounceMs);
  }

  /** Bypass the debounce (used for the initial render and presets). */
  requestNow(req: R): void {
    this.latest = req;
    if (this.timerHandle !== null) {
      this.timer.clearTimeout(this.timerHandle);
      this.timerHandle = null;
    }
    this.fire();
  }

  private fire(): void {
    if (this.latest === null) return;
    if (this.inFlight) {
      this.dirty = true;
      return;
    }
    const req = this.latest;
    const tag = ++this.seq;
    this.inFlight = true;
    this.sent += 1;
    this.send(req).then(
      (result) => {
        this.inFlight = false;
        if (tag > this.shownSeq) {
          this.shownSeq = tag;
          this.onResult(result, req);
        }
        this.drain();
      },
      (err) => {
        this.inFlight = false;
        this.onError(err);
        this.drain();
      },
    );
  }

  private drain(): void {
    if (this.dirty) {
      this.dirty = false;
      this.fire();
    }
  }
}
