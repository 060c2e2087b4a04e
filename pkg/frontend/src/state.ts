/**
 * Pure panel state: a fold over the update transcript.
 *
 * Everything a panel displays is derived from (descriptor, transcript)
 * and nothing else, so replaying a recorded transcript reproduces the
 * exact same display values.
 */

import { Json, UpdateMessage, recordToObject } from "./protocol.js";

export interface FieldSpec {
  name: string;
  kind: string; // readout | flag | badge | chart | record
  mode: "mapper" | "monitor";
  optional: boolean;
}

export interface CommandSpec {
  method: string;
  args: Record<string, string>;
  requires_reservation: boolean;
}

export interface PanelDescriptor {
  type_tag: string;
  panel_kind: string;
  fields: FieldSpec[];
  commands: CommandSpec[];
}

export interface PanelState {
  /** display field -> latest value */
  values: Record<string, Json>;
  /** chart fields accumulate their numeric history */
  series: Record<string, number[]>;
  /** subscription id -> number of updates received */
  counts: Record<string, number>;
  /** fields whose subscription failed (absent on this device) */
  absent: string[];
}

export const SERIES_LIMIT = 120;

export function emptyState(): PanelState {
  return { values: {}, series: {}, counts: {}, absent: [] };
}

/** One transcript step; returns a new state, never mutates. */
export function applyUpdate(
  state: PanelState,
  field: FieldSpec,
  update: UpdateMessage,
): PanelState {
  const next: PanelState = {
    values: { ...state.values },
    series: { ...state.series },
    counts: { ...state.counts },
    absent: state.absent,
  };
  next.counts[update.subscription_id] = (next.counts[update.subscription_id] ?? 0) + 1;
  const data = recordToObject(update.record);
  if (field.mode === "monitor") {
    const value = data["value"] ?? null;
    next.values[field.name] = value;
    if (field.kind === "chart" && typeof value === "number") {
      const history = [...(next.series[field.name] ?? []), value];
      next.series[field.name] = history.slice(-SERIES_LIMIT);
    }
  } else {
    // mapper records project several keys at once
    for (const [key, value] of update.record.entries) {
      next.values[`${field.name}.${key}`] = value;
    }
  }
  return next;
}

export function markAbsent(state: PanelState, fieldName: string): PanelState {
  return { ...state, absent: [...state.absent, fieldName] };
}

/** Deterministic display formatting shared by every panel. */
export function formatValue(value: Json): string {
  if (value === null || value === undefined) return "—";
  if (typeof value === "number") {
    if (Number.isInteger(value)) return String(value);
    return value.toFixed(4);
  }
  if (typeof value === "boolean") return value ? "yes" : "no";
  return String(value);
}

const SPARKS = "▁▂▃▄▅▆▇█";

export function sparkline(series: number[]): string {
  if (series.length === 0) return "";
  const lo = Math.min(...series);
  const hi = Math.max(...series);
  const span = hi - lo;
  return series
    .map((v) => {
      const t = span === 0 ? 0 : (v - lo) / span;
      return SPARKS[Math.min(SPARKS.length - 1, Math.floor(t * SPARKS.length))];
    })
    .join("");
}

/**
 * The complete rendered surface of a panel as plain strings, keyed by
 * display field. This is what lands in the DOM, and what transcript
 * tests compare.
 */
export function viewModel(descriptor: PanelDescriptor, state: PanelState): Record<string, string> {
  const out: Record<string, string> = {};
  for (const field of descriptor.fields) {
    if (state.absent.includes(field.name)) {
      out[field.name] = "n/a";
      continue;
    }
    if (field.mode === "mapper") {
      const prefix = `${field.name}.`;
      for (const key of Object.keys(state.values)) {
        if (key.startsWith(prefix)) out[key] = formatValue(state.values[key]);
      }
      continue;
    }
    out[field.name] = formatValue(state.values[field.name] ?? null);
    if (field.kind === "chart") {
      out[`${field.name}.chart`] = sparkline(state.series[field.name] ?? []);
    }
  }
  return out;
}
