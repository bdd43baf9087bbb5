import { describe, expect, it, vi } from "vitest";

import { RenderScheduler, type RenderResult } from "../src/scheduler.js";

function fakeResult(tag: number): RenderResult {
  return { blob: new Blob([String(tag)]), millis: tag };
}

function manualClock() {
  let now = 0;
  let nextId = 1;
  const pending = new Map<number, { at: number; fn: () => void }>();
  return {
    timer: {
      setTimeout(fn: () => void, ms: number) {
        const id = nextId++;
        pending.set(id, { at: now + ms, fn });
        return id;
      },
      clearTimeout(handle: unknown) {
        pending.delete(handle as number);
      },
    },
    async advance(ms: number) {
      const target = now + ms;
      for (;;) {
        const due = [...pending.entries()]
          .filter(([, p]) => p.at <= target)
          .sort((a, b) => a[1].at - b[1].at)[0];
        if (!due) break;
        now = due[1].at;
        pending.delete(due[0]);
        due[1].fn();
        await Promise.resolve(); // let fetch promises settle
        await Promise.resolve();
      }
      now = target;
    },
  };
}

describe("RenderScheduler", () => {
  it("collapses a 20-event burst in 200ms to at most 2 requests", async () => {
    const clock = manualClock();
    const sent: number[] = [];
    const sched = new RenderScheduler<number>(
      async (r) => {
        sent.push(r);
        return fakeResult(r);
      },
      () => undefined,
      () => undefined,
      150,
      clock.timer,
    );
    for (let i = 0; i < 20; i++) {
      sched.request(i);
      await clock.advance(10);
    }
    await clock.advance(1000);
    expect(sent.length).toBeLessThanOrEqual(2);
    expect(sent.at(-1)).toBe(19); // the trailing edge carries the newest state
  });

  it("fires once after the debounce window for a single change", async () => {
    const clock = manualClock();
    const sent: number[] = [];
    const sched = new RenderScheduler<number>(
      async (r) => {
        sent.push(r);
        return fakeResult(r);
      },
      () => undefined,
      () => undefined,
      150,
      clock.timer,
    );
    sched.request(7);
    await clock.advance(140);
    expect(sent).toEqual([]);
    await clock.advance(20);
    expect(sent).toEqual([7]);
  });

  it("keeps one request in flight and re-sends the newest when dirty", async () => {
    const clock = manualClock();
    const sent: number[] = [];
    const resolvers: Array<(r: RenderResult) => void> = [];
    const shown: number[] = [];
    const sched = new RenderScheduler<number>(
      (r) => {
        sent.push(r);
        return new Promise((resolve) => resolvers.push(resolve));
      },
      (_res, req) => shown.push(req),
      () => undefined,
      150,
      clock.timer,
    );
    sched.request(1);
    await clock.advance(160);
    expect(sent).toEqual([1]);
    expect(sched.state).toBe("pending");

    sched.request(2);
    sched.request(3);
    await clock.advance(160);
    expect(sent).toEqual([1]); // still only one in flight
    expect(sched.state).toBe("pending-dirty");

    resolvers[0](fakeResult(1));
    await clock.advance(1);
    expect(sent).toEqual([1, 3]); // latest params, intermediate 2 skipped
    resolvers[1](fakeResult(3));
    await clock.advance(1);
    expect(shown).toEqual([1, 3]);
    expect(sched.state).toBe("idle");
  });

  it("drops stale results so the newest request owns the preview", async () => {
    const clock = manualClock();
    const shown: number[] = [];
    const resolvers = new Map<number, (r: RenderResult) => void>();
    const sched = new RenderScheduler<number>(
      (r) =>
        new Promise((resolve) => {
          resolvers.set(r, resolve);
        }),
      (_res, req) => shown.push(req),
      () => undefined,
      150,
      clock.timer,
    );
    sched.requestNow(1);
    resolvers.get(1)!(fakeResult(1));
    await clock.advance(1);
    sched.requestNow(2);
    resolvers.get(2)!(fakeResult(2));
    await clock.advance(1);
    expect(shown).toEqual([1, 2]);
  });

  it("recovers after a failed request", async () => {
    const clock = manualClock();
    const errors: unknown[] = [];
    const shown: number[] = [];
    let fail = true;
    const sched = new RenderScheduler<number>(
      async (r) => {
        if (fail) {
          fail = false;
          throw new Error("boom");
        }
        return fakeResult(r);
      },
      (_res, req) => shown.push(req),
      (err) => errors.push(err),
      150,
      clock.timer,
    );
    sched.requestNow(1);
    await clock.advance(5);
    expect(errors).toHaveLength(1);
    sched.requestNow(2);
    await clock.advance(5);
    expect(shown).toEqual([2]);
  });
});
