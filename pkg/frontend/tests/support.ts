/** Test doubles: a stub DOM and a scripted gateway session. */

import { El } from "../src/dom.js";
import { Json, WsLike } from "../src/protocol.js";

export class StubEl implements El {
  children: StubEl[] = [];
  attrs: Record<string, string> = {};
  listeners: Record<string, ((ev?: any) => void)[]> = {};
  textContent: string | null = "";
  className = "";
  value?: string;
  disabled?: boolean;

  constructor(readonly tag: string) {}

  setAttribute(name: string, value: string): void {
    this.attrs[name] = value;
  }

  appendChild(child: El): El {
    this.children.push(child as StubEl);
    return child;
  }

  addEventListener(type: string, handler: (ev?: any) => void): void {
    (this.listeners[type] ??= []).push(handler);
  }

  replaceChildren(...children: El[]): void {
    this.children = children as StubEl[];
  }

  remove(): void {}

  click(): void {
    for (const handler of this.listeners["click"] ?? []) handler();
  }

  /** depth-first search over the subtree */
  find(pred: (el: StubEl) => boolean): StubEl[] {
    const out: StubEl[] = [];
    const walk = (el: StubEl) => {
      if (pred(el)) out.push(el);
      for (const child of el.children) walk(child);
    };
    walk(this);
    return out;
  }

  byField(name: string): StubEl | undefined {
    return this.find((el) => el.attrs["data-field"] === name)[0];
  }

  allText(): string {
    return this.find(() => true)
      .map((el) => el.textContent ?? "")
      .filter(Boolean)
      .join(" ");
  }
}

export const stubDoc = {
  createElement(tag: string): StubEl {
    return new StubEl(tag);
  },
};

type InvokeHandler = (target: string, method: string, args: Record<string, Json>) => Json;

export class FakeWs implements WsLike {
  onmessage: ((ev: { data: string }) => void) | null = null;
  onclose: ((ev?: unknown) => void) | null = null;
  handler: ((msg: Record<string, Json>) => void) | null = null;

  send(data: string): void {
    this.handler?.(JSON.parse(data));
  }

  close(): void {
    this.onclose?.();
  }

  deliver(message: Record<string, Json>): void {
    this.onmessage?.({ data: JSON.stringify(message) });
  }
}

/** One scripted gateway session: auto-acks requests, lets tests push. */
export class GatewaySim {
  ws = new FakeWs();
  subs: Record<string, { target: string; mode: string; name: string }> = {};
  seqs: Record<string, number> = {};
  private nextSub = 1;
  onInvoke: InvokeHandler = () => null;
  /** field subscriptions that should fail, e.g. absent optional axes */
  missing = new Set<string>();

  constructor(readonly label = "sim") {
    this.ws.handler = (msg) => this.handle(msg);
  }

  private handle(msg: Record<string, Json>): void {
    const seq = msg["seq"] as number;
    if (msg["kind"] === "subscribe") {
      const name = String(msg["name"]);
      if (this.missing.has(name)) {
        this.ws.deliver({ kind: "error", seq, code: "NO_SUCH_OBJECT",
                          message: `no field ${name}` });
        return;
      }
      const id = `${this.label}-sub-${this.nextSub++}`;
      this.subs[id] = {
        target: String(msg["target"]),
        mode: String(msg["mode"]),
        name,
      };
      this.ws.deliver({ kind: "result", seq, value: { subscription_id: id } });
    } else if (msg["kind"] === "unsubscribe") {
      delete this.subs[String(msg["subscription_id"])];
      this.ws.deliver({ kind: "result", seq, value: {} });
    } else if (msg["kind"] === "invoke") {
      const value = this.onInvoke(
        String(msg["target"]), String(msg["method"]),
        (msg["args"] ?? {}) as Record<string, Json>);
      if (value && typeof value === "object" && "__error" in (value as object)) {
        const err = (value as { __error: { code: string; message: string } }).__error;
        this.ws.deliver({ kind: "error", seq, code: err.code, message: err.message });
      } else {
        this.ws.deliver({ kind: "result", seq, value });
      }
    }
  }

  /** Push one status report to every matching monitor subscription. */
  pushMonitor(target: string, field: string, value: Json, reason = "change"): void {
    for (const [id, sub] of Object.entries(this.subs)) {
      if (sub.mode !== "monitor" || sub.target !== target || sub.name !== field) continue;
      const seq = (this.seqs[id] = (this.seqs[id] ?? 0) + 1);
      this.ws.deliver({
        kind: "update", subscription_id: id, publisher: target,
        mapper: `status:${field}`,
        record: { seq, entries: [
          ["device", target], ["field", field], ["value", value],
          ["timestamp", seq], ["reason", reason]] },
      });
    }
  }

  pushMapper(target: string, mapper: string, entries: [string, Json][]): void {
    for (const [id, sub] of Object.entries(this.subs)) {
      if (sub.mode !== "mapper" || sub.target !== target || sub.name !== mapper) continue;
      const seq = (this.seqs[id] = (this.seqs[id] ?? 0) + 1);
      this.ws.deliver({
        kind: "update", subscription_id: id, publisher: target, mapper,
        record: { seq, entries },
      });
    }
  }

  pushAlert(alert: Record<string, Json>): void {
    this.ws.deliver({ kind: "alert", alert });
  }
}

export const ACTUATOR_DESCRIPTOR = {
  type_tag: "actuator",
  panel_kind: "actuator",
  fields: [
    { name: "position_0", kind: "readout", mode: "monitor", optional: false },
    { name: "position_1", kind: "readout", mode: "monitor", optional: true },
    { name: "position_2", kind: "readout", mode: "monitor", optional: true },
    { name: "position_3", kind: "readout", mode: "monitor", optional: true },
    { name: "moving", kind: "flag", mode: "monitor", optional: false },
  ],
  commands: [
    { method: "move_to", args: { targets: "number[]" }, requires_reservation: true },
  ],
};

export const SENSOR_DESCRIPTOR = {
  type_tag: "sensor",
  panel_kind: "sensor",
  fields: [{ name: "value", kind: "chart", mode: "monitor", optional: false }],
  commands: [],
};

export const LCU_DESCRIPTOR = {
  type_tag: "alignment_lcu",
  panel_kind: "alignment",
  fields: [
    { name: "summary", kind: "record", mode: "mapper", optional: false },
    { name: "positions", kind: "record", mode: "mapper", optional: false },
  ],
  commands: [
    { method: "align", args: { threshold: "number", max_iters: "number" },
      requires_reservation: false },
    { method: "reset", args: {}, requires_reservation: false },
  ],
};

/** fetchJson double with a URL log for protocol audits. */
export function fakeFetch(routes: Record<string, Json>) {
  const log: string[] = [];
  const fetchJson = async (url: string): Promise<Json> => {
    log.push(url);
    if (url in routes) return routes[url];
    throw { code: "NO_SUCH_OBJECT", message: `404 ${url}` };
  };
  return { fetchJson, log };
}

export async function settle(): Promise<void> {
  // drain the microtask chain a few levels deep
  for (let i = 0; i < 10; i++) await Promise.resolve();
}
