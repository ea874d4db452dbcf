/** State-machine contracts: single-flight submission, local range guard,
 * inline 422 handling, error banner with working retry, protocol widgets.
 */

import { describe, expect, it } from "vitest";

import { FetchLike, SessionClient } from "../src/api.js";
import { SessionController, inRange, valueRange } from "../src/session.js";
import { MockService } from "./mockService.js";

const PAIRS: [string, string][] = [
  ["a", "b"],
  ["a", "c"],
  ["b", "c"],
];

function makeController(mock: MockService, protocol: "edge" | "ordering" = "edge") {
  const client = new SessionClient({ baseUrl: "http://mock.test", fetchFn: mock.fetchFn });
  return new SessionController(client, protocol);
}

describe("value ranges", () => {
  it("matches the protocol", () => {
    expect(valueRange("edge")).toEqual([-1, 1]);
    expect(valueRange("ordering")).toEqual([-10, 10]);
    expect(inRange("edge", 1)).toBe(true);
    expect(inRange("edge", 2)).toBe(false);
    expect(inRange("edge", 0.5)).toBe(false);
    expect(inRange("ordering", -10)).toBe(true);
    expect(inRange("ordering", 11)).toBe(false);
  });
});

describe("local range guard", () => {
  it("never sends an out-of-range value", async () => {
    const mock = new MockService(PAIRS);
    const controller = makeController(mock);
    await controller.start({ budget: 3 });
    const before = mock.transcript.length;

    await controller.answer(5);
    expect(controller.view.status).toBe("question");
    expect(controller.view.rangeMessage).toContain("between -1 and 1");
    expect(mock.transcript.length).toBe(before); // nothing hit the wire

    await controller.answer(1); // valid answer clears the message
    expect(controller.view.rangeMessage).toBeUndefined();
  });

  it("renders a server 422 as an inline message and stays on the question", async () => {
    // A mock with a tighter range than the client believes forces a 422.
    const mock = new MockService(PAIRS, [0, 0]);
    const controller = makeController(mock);
    await controller.start({ budget: 3 });
    await controller.answer(1);
    expect(controller.view.status).toBe("question");
    expect(controller.view.rangeMessage).toContain("outside [0, 0]");
  });
});

describe("single-flight submission", () => {
  it("a double click during flight records exactly one response", async () => {
    const mock = new MockService(PAIRS);
    let release: (() => void) | undefined;
    const gate = new Promise<void>((resolve) => (release = resolve));
    const slowFetch: FetchLike = async (url, init) => {
      if (init?.method === "POST" && url.endsWith("/responses")) await gate;
      return mock.fetchFn(url, init);
    };
    const client = new SessionClient({ baseUrl: "http://mock.test", fetchFn: slowFetch });
    const controller = new SessionController(client, "edge");
    await controller.start({ budget: 3 });

    const first = controller.answer(1); // in flight, gated
    const second = controller.answer(1); // swallowed: status is "submitting"
    release!();
    await Promise.all([first, second]);

    const posts = mock.transcript.filter(
      (r) => r.method === "POST" && r.path.endsWith("/responses"),
    );
    expect(posts).toHaveLength(1);
    expect(controller.view.status).toBe("question");
    expect(controller.view.remaining).toBe(2);
  });
});

describe("service failures", () => {
  it("an unreachable service yields an error banner and retry works", async () => {
    const mock = new MockService(PAIRS);
    let reachable = false;
    const flaky: FetchLike = async (url, init) => {
      if (!reachable) throw new Error("connection refused");
      return mock.fetchFn(url, init);
    };
    const client = new SessionClient({ baseUrl: "http://mock.test", fetchFn: flaky });
    const controller = new SessionController(client, "edge");

    await controller.start({ budget: 3 });
    expect(controller.view.status).toBe("error");
    expect(controller.view.errorMessage).toContain("connection refused");
    expect(controller.view.widget).toBeUndefined();

    reachable = true;
    await controller.retry();
    expect(controller.view.status).toBe("question");
    expect(controller.view.remaining).toBe(3);
  });

  it("an exhausted session on next-query finishes with the final estimate", async () => {
    const mock = new MockService(PAIRS);
    const controller = makeController(mock);
    await controller.start({ budget: 1 });
    await controller.answer(1);
    expect(controller.view.status).toBe("done");
    expect(controller.view.estimate!.edges).toEqual([["a", "b", 0.77]]);
  });
});

describe("protocol widgets", () => {
  it("edge sessions get ternary buttons for the served pair", async () => {
    const mock = new MockService(PAIRS);
    const controller = makeController(mock, "edge");
    await controller.start({ budget: 3 });
    expect(controller.view.widget).toEqual({ kind: "ternary", pair: ["a", "b"] });
  });

  it("ordering sessions get a -10..10 slider", async () => {
    const mock = new MockService(PAIRS, [-10, 10]);
    const controller = makeController(mock, "ordering");
    await controller.start({ budget: 3 });
    expect(controller.view.widget).toEqual({
      kind: "slider",
      pair: ["a", "b"],
      min: -10,
      max: 10,
    });
    await controller.answer(10); // extreme of the range is legal on the wire
    expect(controller.view.status).toBe("question");
  });
});
