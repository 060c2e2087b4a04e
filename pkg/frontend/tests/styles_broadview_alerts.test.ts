import { describe, expect, it } from "vitest";

import { AlertsPane } from "../src/alerts.js";
import { Broadview } from "../src/broadview.js";
import { GatewayClient } from "../src/protocol.js";
import { fetchStyles, severityVar, toCssVariables } from "../src/styles.js";
import { GatewaySim, StubEl, fakeFetch, settle, stubDoc } from "./support.js";

const TOKENS = {
  colors: { background: "#10141a", accent: "#4cc2ff" },
  severity_colors: { warning: "#d29922", critical: "#ff6a69" },
  state_colors: { ready: "#3fb950", failed: "#f85149" },
  fonts: { ui: "system-ui", mono: "monospace" },
  spacing: [2, 4, 8],
};

describe("style tokens", () => {
  it("styles come solely from /api/styles", async () => {
    const { fetchJson, log } = fakeFetch({ "/api/styles": TOKENS });
    const tokens = await fetchStyles(fetchJson);
    expect(log).toEqual(["/api/styles"]);
    const css = toCssVariables(tokens as never);
    expect(css).toContain("--sev-warning: #d29922;");
    expect(css).toContain("--state-ready: #3fb950;");
    expect(css).toContain("--color-accent: #4cc2ff;");
    expect(css).toContain("--font-mono: monospace;");
    expect(css).toContain("--space-2: 8px;");
  });

  it("panes reference severity colors only through token variables", () => {
    // indirection, not constants: a token change restyles with no code change
    expect(severityVar("critical")).toBe("var(--sev-critical)");
  });
});

const BROADVIEW = {
  facility: "demo",
  processes: [
    { name: "fep_align", category: "fep", state: "ready", alert_count: 0,
      objects: [{ name: "actuator_A", type_tag: "actuator" },
                { name: "actuator_B", type_tag: "actuator" }] },
    { name: "sup_align", category: "supervisor", state: "ready", alert_count: 1,
      objects: [{ name: "lcu_align", type_tag: "alignment_lcu" }] },
  ],
  raised_alerts: 1,
};

describe("broadview", () => {
  it("opening a panel from a node passes exactly {type_tag, identity}", async () => {
    const { fetchJson } = fakeFetch({ "/api/broadview": BROADVIEW });
    const opened: [string, string][] = [];
    const bv = new Broadview(stubDoc, fetchJson, (tag, identity) => {
      opened.push([tag, identity]);
    });
    await bv.load();
    const root = bv.root as never as StubEl;
    const buttons = root.find((el) => el.attrs["class"] === undefined && el.className === "bv-open");
    expect(buttons.length).toBe(3);
    buttons[0].click();
    buttons[2].click();
    expect(opened).toEqual([["actuator", "actuator_A"], ["alignment_lcu", "lcu_align"]]);
  });

  it("process states recolor from pushed events, not re-fetches", async () => {
    const { fetchJson, log } = fakeFetch({ "/api/broadview": BROADVIEW });
    const bv = new Broadview(stubDoc, fetchJson, () => {});
    await bv.load();
    const sim = new GatewaySim();
    const client = new GatewayClient(sim.ws);
    bv.followEvents(client);
    sim.ws.deliver({ kind: "event", event: {
      name: "process_state", source: "fep_align", payload: { state: "failed" } } });
    await settle();
    const root = bv.root as never as StubEl;
    const stateNode = root.find((el) => el.attrs["data-state-of"] === "fep_align")[0];
    expect(stateNode.textContent).toBe("failed");
    expect(stateNode.attrs["style"]).toBe("color: var(--state-failed)");
    expect(log).toEqual(["/api/broadview"]);  // exactly one fetch, no polling
  });
});

function alertPayload(id: string, severity: string, state = "raised") {
  return { id, severity, state, acked_by: null,
           event: { name: "over_temp", source: "fep_align", payload: null, timestamp: 1 } };
}

describe("alert pane", () => {
  it("lists raised alerts with token-derived colors and acknowledges once", async () => {
    const sim = new GatewaySim();
    const acked: string[] = [];
    sim.onInvoke = (target, method, args) => {
      if (method === "list_alerts") return [alertPayload("a1", "critical")] as never;
      if (method === "acknowledge") {
        acked.push(String(args["alert_id"]));
        return true;
      }
      return null;
    };
    const client = new GatewayClient(sim.ws);
    const pane = new AlertsPane(stubDoc, client, "op9");
    await pane.load();
    const root = pane.root as never as StubEl;
    const row = root.find((el) => el.attrs["data-alert"] === "a1")[0];
    expect(row).toBeDefined();
    expect(row.attrs["style"]).toBe("color: var(--sev-critical)");

    const ackButton = row.find((el) => el.tag === "button")[0];
    ackButton.click();
    await settle();
    expect(acked).toEqual(["a1"]);

    // the acknowledged push clears it from the raised list on every console
    sim.pushAlert({ ...alertPayload("a1", "critical", "acknowledged"), acked_by: "op9" });
    await settle();
    expect(pane.raised()).toEqual([]);
    expect(root.find((el) => el.attrs["data-alert"] === "a1").length).toBe(0);
  });

  it("alert pushes appear on all panes (dual console)", async () => {
    const make = async () => {
      const sim = new GatewaySim();
      sim.onInvoke = (_t, method) => (method === "list_alerts" ? ([] as never) : null);
      const client = new GatewayClient(sim.ws);
      const pane = new AlertsPane(stubDoc, client, "op");
      await pane.load();
      return { sim, pane };
    };
    const c1 = await make();
    const c2 = await make();
    c1.sim.pushAlert(alertPayload("z1", "warning"));
    c2.sim.pushAlert(alertPayload("z1", "warning"));
    await settle();
    expect(c1.pane.raised().map((a) => a.id)).toEqual(["z1"]);
    expect(c2.pane.raised().map((a) => a.id)).toEqual(["z1"]);
  });
});
