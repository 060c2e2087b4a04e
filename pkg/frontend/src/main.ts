/**
 * Browser entry point: wires the console to the real document, fetch and
 * WebSocket. Everything below this file is injectable and test-driven.
 */

import { AlertsPane } from "./alerts.js";
import { Broadview } from "./broadview.js";
import { h } from "./dom.js";
import { PanelInstance } from "./panel.js";
import { GatewayClient, WsLike } from "./protocol.js";
import { fetchStyles, toCssVariables } from "./styles.js";

async function fetchJson(url: string): Promise<any> {
  const response = await fetch(url);
  const body = await response.json();
  if (!response.ok) throw body;
  return body;
}

async function boot(): Promise<void> {
  const params = new URLSearchParams(location.search);
  const operator = params.get("operator") ?? "operator";

  const tokens = await fetchStyles(fetchJson);
  const styleEl = document.createElement("style");
  styleEl.textContent = toCssVariables(tokens);
  document.head.appendChild(styleEl);

  const scheme = location.protocol === "https:" ? "wss" : "ws";
  const ws = new WebSocket(`${scheme}://${location.host}/ws?operator=${operator}`);
  await new Promise<void>((resolve, reject) => {
    ws.onopen = () => resolve();
    ws.onerror = (e) => reject(e);
  });
  // adapt the browser socket to the narrow client-facing surface
  const wsLike: WsLike = {
    send: (data) => ws.send(data),
    close: () => ws.close(),
    onmessage: null,
    onclose: null,
  };
  ws.onmessage = (ev) => wsLike.onmessage?.({ data: String(ev.data) });
  ws.onclose = () => wsLike.onclose?.();
  const client = new GatewayClient(wsLike);
  const doc = document;

  const panelArea = h(doc, "main", { class: "panel-area" });
  const deps = { doc, client, fetchJson, operator };

  const broadview = new Broadview(doc, fetchJson, (typeTag, identity) => {
    void PanelInstance.open(deps, typeTag, identity).then((panel) => {
      const card = h(doc, "div", { class: "panel-card" });
      const close = h(doc, "button", { class: "panel-close" }, "×");
      close.addEventListener("click", () => {
        void panel.close().then(() => card.remove());
      });
      card.appendChild(close);
      card.appendChild(panel.root);
      panelArea.appendChild(card);
    }).catch((err) => {
      const banner = h(doc, "div", { class: "error-banner" },
        `${err.code ?? "ERROR"}: ${err.message ?? String(err)}`);
      panelArea.appendChild(banner);
    });
  });
  broadview.followEvents(client);
  await broadview.load();

  const alerts = new AlertsPane(doc, client, operator);
  await alerts.load();

  const shell = h(doc, "div", { class: "shell" });
  shell.appendChild(broadview.root);
  shell.appendChild(panelArea);
  shell.appendChild(alerts.root);
  document.body.replaceChildren(shell as unknown as Node);
  document.title = `console — ${operator}`;
}

void boot();
