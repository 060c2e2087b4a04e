import { describe, expect, it, vi } from "vitest";

import { PanelInstance, parseArg } from "../src/panel.js";
import { GatewayClient } from "../src/protocol.js";
import {
  ACTUATOR_DESCRIPTOR,
  GatewaySim,
  LCU_DESCRIPTOR,
  fakeFetch,
  settle,
  stubDoc,
} from "./support.js";

function actuatorSetup(label = "sim") {
  const sim = new GatewaySim(label);
  sim.missing = new Set(["position_2", "position_3"]);  // a 2-axis device
  const client = new GatewayClient(sim.ws);
  const { fetchJson, log } = fakeFetch({ "/api/panels/actuator": ACTUATOR_DESCRIPTOR });
  const deps = { doc: stubDoc, client, fetchJson, operator: "op1" };
  return { sim, client, deps, log };
}

describe("opening a panel", () => {
  it("uses exactly {type_tag, identity} and descriptor-declared names", async () => {
    const { sim, client, deps, log } = actuatorSetup();
    const panel = await PanelInstance.open(deps, "actuator", "actuator_A");
    await settle();

    // HTTP: only the descriptor for the type tag
    expect(log).toEqual(["/api/panels/actuator"]);

    // WS: only subscribes; target is the identity; names from the descriptor
    const fieldNames = ACTUATOR_DESCRIPTOR.fields.map((f) => f.name);
    for (const msg of client.sent) {
      expect(msg["kind"]).toBe("subscribe");
      expect(Object.keys(msg).sort()).toEqual(
        ["kind", "mode", "name", "params", "seq", "target"]);
      expect(msg["target"]).toBe("actuator_A");
      expect(fieldNames).toContain(msg["name"]);
    }
    expect(panel.descriptor.type_tag).toBe("actuator");
  });

  it("tolerates absent optional fields and shows n/a", async () => {
    const { deps } = actuatorSetup();
    const panel = await PanelInstance.open(deps, "actuator", "actuator_A");
    await settle();
    expect(panel.viewModel()["position_2"]).toBe("n/a");
    expect(panel.state.absent).toEqual(["position_2", "position_3"]);
  });

  it("unknown type tag surfaces the gateway error verbatim", async () => {
    const { client } = actuatorSetup();
    const { fetchJson } = fakeFetch({});
    const deps = { doc: stubDoc, client, fetchJson, operator: "op1" };
    await expect(PanelInstance.open(deps, "warp_core", "x"))
      .rejects.toMatchObject({ code: "NO_SUCH_OBJECT" });
  });
});

describe("rendering pushed updates", () => {
  it("renders monitor reports into the field nodes", async () => {
    const { sim, deps } = actuatorSetup();
    const panel = await PanelInstance.open(deps, "actuator", "actuator_A");
    sim.pushMonitor("actuator_A", "position_0", 0.5, "initial");
    sim.pushMonitor("actuator_A", "moving", false, "initial");
    sim.pushMonitor("actuator_A", "position_0", 0.625);
    await settle();
    const root = panel.root as never as import("./support.js").StubEl;
    expect(root.byField("position_0")!.textContent).toBe("0.6250");
    expect(root.byField("moving")!.textContent).toBe("no");
  });

  it("renders mapper records as labelled rows", async () => {
    const sim = new GatewaySim();
    const client = new GatewayClient(sim.ws);
    const { fetchJson } = fakeFetch({ "/api/panels/alignment_lcu": LCU_DESCRIPTOR as never });
    const deps = { doc: stubDoc, client, fetchJson, operator: "op1" };
    const panel = await PanelInstance.open(deps, "alignment_lcu", "lcu_align");
    sim.pushMapper("lcu_align", "summary",
                   [["phase", "aligning"], ["best_value", 0.81], ["iteration", 12]]);
    await settle();
    const root = panel.root as never as import("./support.js").StubEl;
    expect(root.byField("summary.phase")!.textContent).toBe("aligning");
    expect(root.byField("summary.best_value")!.textContent).toBe("0.8100");
    expect(root.byField("summary.iteration")!.textContent).toBe("12");
  });

  it("render is a pure function of the transcript (replay equality)", async () => {
    const script = (sim: GatewaySim) => {
      sim.pushMonitor("actuator_A", "position_0", 0.5, "initial");
      sim.pushMonitor("actuator_A", "position_0", 0.3);
      sim.pushMonitor("actuator_A", "moving", true, "initial");
      sim.pushMonitor("actuator_A", "position_0", 0.1);
      sim.pushMonitor("actuator_A", "moving", false);
    };
    const run = async (label: string) => {
      const { sim, deps } = actuatorSetup(label);
      const panel = await PanelInstance.open(deps, "actuator", "actuator_A");
      script(sim);
      await settle();
      return panel.viewModel();
    };
    expect(await run("r1")).toEqual(await run("r2"));
  });
});

describe("commands", () => {
  it("relays RESERVED verbatim when moving unreserved", async () => {
    const { sim, deps } = actuatorSetup();
    sim.onInvoke = (_t, method) =>
      method === "move_to"
        ? { __error: { code: "RESERVED", message: "requires a valid token" } }
        : null;
    const panel = await PanelInstance.open(deps, "actuator", "actuator_A");
    await panel.command("move_to", { targets: [1, 1] });
    expect(panel.lastStatus()).toBe("RESERVED: requires a valid token");
  });

  it("reserve then move then release drives the device", async () => {
    const { sim, deps } = actuatorSetup();
    const calls: string[] = [];
    sim.onInvoke = (target, method, args) => {
      calls.push(`${target}.${method}`);
      if (target === "__reservations") return { device: args["device"], holder: "op1" };
      if (method === "move_to") return { accepted: true, move_id: 1 } as never;
      return null;
    };
    const panel = await PanelInstance.open(deps, "actuator", "actuator_A");
    const root = panel.root as never as import("./support.js").StubEl;

    const buttons = root.find((el) => el.tag === "button");
    const reserveBtn = buttons.find((b) => b.allText().includes("reserve"))!;
    reserveBtn.click();
    await settle();
    expect(root.byField("__reservation")!.textContent).toBe("held by op1");

    await panel.command("move_to", { targets: [0.2, -0.2] });
    sim.pushMonitor("actuator_A", "position_0", 0.2);
    sim.pushMonitor("actuator_A", "position_1", -0.2);
    await settle();
    expect(root.byField("position_0")!.textContent).toBe("0.2000");
    expect(root.byField("position_1")!.textContent).toBe("-0.2000");

    const releaseBtn = buttons.find((b) => b.allText().includes("release"))!;
    releaseBtn.click();
    await settle();
    expect(calls).toEqual([
      "__reservations.reserve", "actuator_A.move_to", "__reservations.release"]);
  });

  it("command form parses typed args", () => {
    expect(parseArg("number[]", "0.5, -0.5")).toEqual([0.5, -0.5]);
    expect(parseArg("number", "3.25")).toBe(3.25);
    expect(parseArg("boolean", "true")).toBe(true);
    expect(parseArg("string", "hello")).toBe("hello");
  });
});

describe("no polling", () => {
  it("issues no network traffic while idle", async () => {
    vi.useFakeTimers();
    try {
      const { sim, client, deps, log } = actuatorSetup();
      await PanelInstance.open(deps, "actuator", "actuator_A");
      await settle();
      const sentBefore = client.sent.length;
      const fetchesBefore = log.length;
      vi.advanceTimersByTime(60_000);
      await settle();
      expect(client.sent.length).toBe(sentBefore);
      expect(log.length).toBe(fetchesBefore);
    } finally {
      vi.useRealTimers();
    }
  });
});
