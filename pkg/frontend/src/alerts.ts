/**
 * Alert pane: raised alerts with acknowledgment.
 *
 * Severity colors resolve through the served style tokens (CSS variables
 * injected at boot); the pane itself contains no color values.
 */

import { Doc, El, h } from "./dom.js";
import { AlertPayload, GatewayClient } from "./protocol.js";
import { severityVar } from "./styles.js";

export class AlertsPane {
  readonly root: El;
  readonly alerts = new Map<string, AlertPayload>();

  constructor(
    private doc: Doc,
    private client: GatewayClient,
    private operator: string,
  ) {
    this.root = h(doc, "aside", { class: "alerts" });
    client.onAlert((alert) => this.upsert(alert));
  }

  async load(): Promise<void> {
    const listed = (await this.client.invoke("__events", "list_alerts", {})) as
      unknown as AlertPayload[];
    for (const alert of listed) this.alerts.set(alert.id, alert);
    this.render();
  }

  private upsert(alert: AlertPayload): void {
    this.alerts.set(alert.id, alert);
    this.render();
  }

  raised(): AlertPayload[] {
    return [...this.alerts.values()].filter((a) => a.state === "raised");
  }

  async acknowledge(alertId: string): Promise<void> {
    await this.client.invoke("__events", "acknowledge", {
      alert_id: alertId,
      operator: this.operator,
    });
    // the acknowledged push refreshes the pane; nothing local to flip
  }

  render(): void {
    const { doc } = this;
    const rows: El[] = [h(doc, "h2", {}, "alerts")];
    for (const alert of this.raised()) {
      const row = h(doc, "div", {
        class: "alert-row",
        "data-alert": alert.id,
        style: `color: ${severityVar(alert.severity)}`,
      });
      row.appendChild(h(doc, "span", { class: "alert-sev" }, alert.severity));
      row.appendChild(h(doc, "span", { class: "alert-name" }, alert.event.name));
      row.appendChild(h(doc, "span", { class: "alert-src" }, alert.event.source));
      const ack = h(doc, "button", {}, "acknowledge");
      ack.addEventListener("click", () => {
        void this.acknowledge(alert.id);
      });
      row.appendChild(ack);
      rows.push(row);
    }
    if (rows.length === 1) rows.push(h(doc, "p", { class: "alerts-clear" }, "no raised alerts"));
    this.root.replaceChildren(...rows);
  }
}
