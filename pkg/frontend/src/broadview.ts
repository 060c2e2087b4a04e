/**
 * Broadview: the facility tree and device selector.
 *
 * Opening a panel from a node hands over exactly {type_tag, identity};
 * the broadview knows nothing else about the object. Process states
 * refresh from pushed process_state events; there is no polling.
 */

import { Doc, El, h } from "./dom.js";
import { GatewayClient, Json } from "./protocol.js";
import { FetchJson } from "./styles.js";
import { stateVar } from "./styles.js";

export interface BroadviewNode {
  name: string;
  type_tag: string;
}

export interface BroadviewProcess {
  name: string;
  category: string;
  state: string;
  alert_count: number;
  objects: BroadviewNode[];
}

export interface BroadviewData {
  facility: string;
  processes: BroadviewProcess[];
  raised_alerts: number;
}

export type OpenPanel = (typeTag: string, identity: string) => void;

export class Broadview {
  readonly root: El;
  data: BroadviewData | null = null;
  private stateNodes = new Map<string, El>();

  constructor(
    private doc: Doc,
    private fetchJson: FetchJson,
    private onOpen: OpenPanel,
  ) {
    this.root = h(doc, "nav", { class: "broadview" });
  }

  async load(): Promise<void> {
    this.data = (await this.fetchJson("/api/broadview")) as BroadviewData;
    this.renderTree();
  }

  /** Keep states live from pushed events instead of re-fetching. */
  followEvents(client: GatewayClient): void {
    client.onEvent((event: Json) => {
      const e = event as { name?: string; source?: string; payload?: { state?: string } };
      if (e?.name !== "process_state" || !e.source || !e.payload?.state) return;
      if (this.data) {
        const proc = this.data.processes.find((p) => p.name === e.source);
        if (proc) proc.state = e.payload.state;
      }
      const node = this.stateNodes.get(e.source);
      if (node) {
        node.textContent = e.payload.state;
        node.setAttribute("style", `color: ${stateVar(e.payload.state)}`);
      }
    });
  }

  private renderTree(): void {
    if (!this.data) return;
    const { doc } = this;
    const items: El[] = [h(doc, "h2", {}, `facility: ${this.data.facility}`)];
    for (const proc of this.data.processes) {
      const header = h(doc, "div", { class: "bv-process" });
      header.appendChild(h(doc, "strong", {}, proc.name));
      const state = h(doc, "span", {
        class: "bv-state",
        "data-state-of": proc.name,
        style: `color: ${stateVar(proc.state)}`,
      }, proc.state);
      this.stateNodes.set(proc.name, state);
      header.appendChild(state);
      if (proc.alert_count > 0) {
        header.appendChild(h(doc, "span", { class: "bv-alerts" }, `⚠ ${proc.alert_count}`));
      }
      const list = h(doc, "ul", { class: "bv-objects" });
      for (const obj of proc.objects) {
        const button = h(doc, "button", { class: "bv-open" }, `${obj.name} (${obj.type_tag})`);
        button.addEventListener("click", () => this.onOpen(obj.type_tag, obj.name));
        list.appendChild(h(doc, "li", {}, button));
      }
      items.push(header, list);
    }
    this.root.replaceChildren(...items);
  }
}
