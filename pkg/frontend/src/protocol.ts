/**
 * Gateway wire protocol: typed messages and a small request/subscription
 * client over one WebSocket.
 *
 * Every outbound message is recorded in `sent` so tests can audit exactly
 * what the console reveals to the gateway.
 */

export type Json =
  | null
  | boolean
  | number
  | string
  | Json[]
  | { [key: string]: Json };

export interface WireRecord {
  seq: number;
  entries: [string, Json][];
}

export interface UpdateMessage {
  kind: "update";
  subscription_id: string;
  publisher: string;
  mapper: string;
  record: WireRecord;
}

export interface AlertPayload {
  id: string;
  severity: string;
  state: string;
  acked_by: string | null;
  event: { name: string; source: string; payload: Json; timestamp: number };
}

export interface GatewayError {
  code: string;
  message: string;
}

/** Minimal shape of a WebSocket; the browser one satisfies it. */
export interface WsLike {
  send(data: string): void;
  close(): void;
  onmessage: ((ev: { data: string }) => void) | null;
  onclose: ((ev?: unknown) => void) | null;
}

interface Pending {
  resolve: (value: Json) => void;
  reject: (err: GatewayError) => void;
}

export class GatewayClient {
  readonly sent: Record<string, Json>[] = [];
  private nextSeq = 1;
  private pending = new Map<number, Pending>();
  private updateHandlers = new Map<string, (u: UpdateMessage) => void>();
  private alertHandlers: ((a: AlertPayload) => void)[] = [];
  private eventHandlers: ((e: Json) => void)[] = [];

  constructor(private ws: WsLike) {
    ws.onmessage = (ev) => this.route(JSON.parse(ev.data));
    ws.onclose = () => this.failAll({ code: "COMM_FAILURE", message: "socket closed" });
  }

  private route(message: Record<string, Json>): void {
    const kind = message["kind"];
    if (kind === "result" || kind === "error") {
      const seq = message["seq"] as number;
      const pending = this.pending.get(seq);
      if (!pending) return;
      this.pending.delete(seq);
      if (kind === "result") pending.resolve(message["value"] as Json);
      else pending.reject({
        code: String(message["code"]),
        message: String(message["message"] ?? ""),
      });
    } else if (kind === "update") {
      const update = message as unknown as UpdateMessage;
      const handler = this.updateHandlers.get(update.subscription_id);
      if (handler) handler(update);
    } else if (kind === "alert") {
      const alert = message["alert"] as unknown as AlertPayload;
      for (const h of this.alertHandlers) h(alert);
    } else if (kind === "event") {
      for (const h of this.eventHandlers) h(message["event"] as Json);
    }
  }

  private failAll(err: GatewayError): void {
    for (const pending of this.pending.values()) pending.reject(err);
    this.pending.clear();
  }

  private request(message: Record<string, Json>): Promise<Json> {
    const seq = this.nextSeq++;
    const full = { ...message, seq };
    this.sent.push(full);
    return new Promise((resolve, reject) => {
      this.pending.set(seq, { resolve, reject });
      this.ws.send(JSON.stringify(full));
    });
  }

  async subscribe(
    target: string,
    mode: "mapper" | "monitor",
    name: string,
    params: Record<string, Json>,
    onUpdate: (u: UpdateMessage) => void,
  ): Promise<string> {
    const value = (await this.request({
      kind: "subscribe", target, mode, name, params,
    })) as { subscription_id: string };
    this.updateHandlers.set(value.subscription_id, onUpdate);
    return value.subscription_id;
  }

  async unsubscribe(subscriptionId: string): Promise<void> {
    this.updateHandlers.delete(subscriptionId);
    await this.request({ kind: "unsubscribe", subscription_id: subscriptionId });
  }

  invoke(target: string, method: string, args: Record<string, Json> = {}): Promise<Json> {
    return this.request({ kind: "invoke", target, method, args });
  }

  onAlert(handler: (a: AlertPayload) => void): void {
    this.alertHandlers.push(handler);
  }

  onEvent(handler: (e: Json) => void): void {
    this.eventHandlers.push(handler);
  }

  close(): void {
    this.ws.close();
  }
}

export function recordToObject(record: WireRecord): Record<string, Json> {
  const out: Record<string, Json> = {};
  for (const [key, value] of record.entries) out[key] = value;
  return out;
}
