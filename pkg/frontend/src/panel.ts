/**
 * PanelInstance: one live control panel for one target object.
 *
 * A panel is built from exactly two inputs: the descriptor fetched by
 * type tag, and the target identity. Subscriptions come from the
 * descriptor's field list; display state is a pure fold over the received
 * update transcript; commands are descriptor-declared invokes, with
 * reserve/release controls whenever any command needs a reservation.
 */

import { Doc, El, h } from "./dom.js";
import { GatewayClient, GatewayError, Json, UpdateMessage } from "./protocol.js";
import {
  CommandSpec,
  FieldSpec,
  PanelDescriptor,
  PanelState,
  applyUpdate,
  emptyState,
  markAbsent,
  viewModel,
} from "./state.js";
import { FetchJson } from "./styles.js";

export interface PanelDeps {
  doc: Doc;
  client: GatewayClient;
  fetchJson: FetchJson;
  operator: string;
}

export class PanelInstance {
  state: PanelState = emptyState();
  readonly subscriptionIds: string[] = [];
  readonly root: El;
  private fieldNodes = new Map<string, El>();
  private statusNode: El;
  private reservedNode: El | null = null;
  private closed = false;

  private constructor(
    private deps: PanelDeps,
    readonly descriptor: PanelDescriptor,
    readonly identity: string,
  ) {
    this.root = h(deps.doc, "section", { class: "panel", "data-panel": identity });
    this.statusNode = h(deps.doc, "div", { class: "panel-status", "data-field": "__status" });
    this.build();
  }

  /** Open a panel knowing nothing but {type_tag, identity}. */
  static async open(
    deps: PanelDeps,
    typeTag: string,
    identity: string,
  ): Promise<PanelInstance> {
    const descriptor = (await deps.fetchJson(`/api/panels/${typeTag}`)) as PanelDescriptor;
    const panel = new PanelInstance(deps, descriptor, identity);
    await panel.subscribeAll();
    return panel;
  }

  private build(): void {
    const { doc } = this.deps;
    this.root.appendChild(h(doc, "header", { class: "panel-title" },
      `${this.descriptor.panel_kind}: ${this.identity}`));
    const grid = h(doc, "div", { class: "panel-fields" });
    for (const field of this.descriptor.fields) {
      if (field.mode === "mapper") {
        // mapper records carry their own keys; rendered into one block
        const block = h(doc, "div", { class: "field-record", "data-record": field.name });
        this.fieldNodes.set(`record:${field.name}`, block);
        grid.appendChild(block);
        continue;
      }
      const row = h(doc, "div", { class: "field-row" });
      row.appendChild(h(doc, "label", {}, field.name));
      const valueNode = h(doc, "output", { class: `field-${field.kind}`, "data-field": field.name }, "—");
      this.fieldNodes.set(field.name, valueNode);
      row.appendChild(valueNode);
      if (field.kind === "chart") {
        const chart = h(doc, "div", { class: "field-chart", "data-field": `${field.name}.chart` });
        this.fieldNodes.set(`${field.name}.chart`, chart);
        row.appendChild(chart);
      }
      grid.appendChild(row);
    }
    this.root.appendChild(grid);
    if (this.descriptor.commands.length > 0) {
      this.root.appendChild(this.buildCommands());
    }
    this.root.appendChild(this.statusNode);
  }

  private buildCommands(): El {
    const { doc } = this.deps;
    const bar = h(doc, "div", { class: "panel-commands" });
    if (this.descriptor.commands.some((c) => c.requires_reservation)) {
      bar.appendChild(this.buildReservationControls());
    }
    for (const command of this.descriptor.commands) {
      bar.appendChild(this.buildCommandForm(command));
    }
    return bar;
  }

  private buildReservationControls(): El {
    const { doc } = this.deps;
    const box = h(doc, "div", { class: "reservation" });
    this.reservedNode = h(doc, "output", { "data-field": "__reservation" }, "unreserved");
    const reserve = h(doc, "button", {}, "reserve");
    reserve.addEventListener("click", () => {
      void this.runReservation("reserve");
    });
    const release = h(doc, "button", {}, "release");
    release.addEventListener("click", () => {
      void this.runReservation("release");
    });
    box.appendChild(this.reservedNode);
    box.appendChild(reserve);
    box.appendChild(release);
    return box;
  }

  private async runReservation(method: "reserve" | "release"): Promise<void> {
    try {
      await this.deps.client.invoke("__reservations", method, { device: this.identity });
      if (this.reservedNode) {
        this.reservedNode.textContent =
          method === "reserve" ? `held by ${this.deps.operator}` : "unreserved";
      }
      this.showStatus(`${method} ok`);
    } catch (err) {
      this.showError(err as GatewayError);
    }
  }

  private buildCommandForm(command: CommandSpec): El {
    const { doc } = this.deps;
    const form = h(doc, "form", { class: "command", "data-command": command.method });
    form.appendChild(h(doc, "span", {}, command.method));
    const inputs = new Map<string, El>();
    for (const [arg, kind] of Object.entries(command.args)) {
      const input = h(doc, "input", { name: arg, placeholder: `${arg} (${kind})` });
      inputs.set(arg, input);
      form.appendChild(input);
    }
    const go = h(doc, "button", { type: "button" }, "send");
    go.addEventListener("click", () => {
      const args: Record<string, Json> = {};
      for (const [arg, input] of inputs) {
        args[arg] = parseArg(command.args[arg], input.value ?? "");
      }
      void this.command(command.method, args);
    });
    form.appendChild(go);
    return form;
  }

  private async subscribeAll(): Promise<void> {
    for (const field of this.descriptor.fields) {
      const params: Record<string, Json> =
        field.mode === "monitor" ? { precision: 0, latency_ms: 100 } : {};
      try {
        const subId = await this.deps.client.subscribe(
          this.identity, field.mode, field.name, params,
          (update) => this.onUpdate(field, update));
        this.subscriptionIds.push(subId);
      } catch (err) {
        const failure = err as GatewayError;
        if (field.optional && failure.code === "NO_SUCH_OBJECT") {
          this.state = markAbsent(this.state, field.name);
          this.render();
          continue;
        }
        this.showError(failure);
      }
    }
  }

  private onUpdate(field: FieldSpec, update: UpdateMessage): void {
    this.state = applyUpdate(this.state, field, update);
    this.render();
  }

  /** Issue a descriptor command; results and errors are always rendered. */
  async command(method: string, args: Record<string, Json>): Promise<Json | undefined> {
    try {
      const value = await this.deps.client.invoke(this.identity, method, args);
      this.showStatus(`${method}: ok ${JSON.stringify(value ?? null)}`);
      return value;
    } catch (err) {
      this.showError(err as GatewayError);
      return undefined;
    }
  }

  render(): void {
    const vm = this.viewModel();
    for (const [key, text] of Object.entries(vm)) {
      const node = this.fieldNodes.get(key);
      if (node) {
        node.textContent = text;
        continue;
      }
      // mapper-record keys land inside their record block
      const dot = key.indexOf(".");
      if (dot > 0) {
        const block = this.fieldNodes.get(`record:${key.slice(0, dot)}`);
        if (block) this.renderRecordBlock(key.slice(0, dot), vm);
      }
    }
  }

  private renderRecordBlock(recordName: string, vm: Record<string, string>): void {
    const block = this.fieldNodes.get(`record:${recordName}`)!;
    const { doc } = this.deps;
    const rows: El[] = [];
    for (const [key, text] of Object.entries(vm)) {
      if (!key.startsWith(`${recordName}.`)) continue;
      const row = h(doc, "div", { class: "field-row" });
      row.appendChild(h(doc, "label", {}, key.slice(recordName.length + 1)));
      const valueNode = h(doc, "output", { "data-field": key });
      valueNode.textContent = text;
      row.appendChild(valueNode);
      rows.push(row);
    }
    block.replaceChildren(...rows);
  }

  /** The full displayed surface, keyed by data-field. */
  viewModel(): Record<string, string> {
    return viewModel(this.descriptor, this.state);
  }

  updateCounts(): Record<string, number> {
    return { ...this.state.counts };
  }

  private showStatus(text: string): void {
    this.statusNode.textContent = text;
    this.statusNode.className = "panel-status";
  }

  private showError(err: GatewayError): void {
    // gateway errors are rendered verbatim, never swallowed
    this.statusNode.textContent = `${err.code}: ${err.message}`;
    this.statusNode.className = "panel-status error";
  }

  lastStatus(): string {
    return this.statusNode.textContent ?? "";
  }

  async close(): Promise<void> {
    if (this.closed) return;
    this.closed = true;
    for (const subId of this.subscriptionIds) {
      try {
        await this.deps.client.unsubscribe(subId);
      } catch {
        // gateway may already have dropped the session
      }
    }
    this.root.remove();
  }
}

export function parseArg(kind: string, raw: string): Json {
  const text = raw.trim();
  if (kind === "number") return Number(text);
  if (kind === "number[]") {
    if (text === "") return [];
    return text.split(",").map((part) => Number(part.trim()));
  }
  if (kind === "boolean") return text === "true";
  return text;
}
