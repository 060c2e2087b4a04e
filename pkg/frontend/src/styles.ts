/**
 * Central style tokens. The console carries no color or font constants of
 * its own: everything visual resolves through CSS variables derived from
 * the gateway's /api/styles document.
 */

export interface StyleTokens {
  colors: Record<string, string>;
  severity_colors: Record<string, string>;
  state_colors: Record<string, string>;
  fonts: Record<string, string>;
  spacing: number[];
}

export type FetchJson = (url: string) => Promise<any>;

export async function fetchStyles(fetchJson: FetchJson): Promise<StyleTokens> {
  return (await fetchJson("/api/styles")) as StyleTokens;
}

/** Token document -> CSS custom properties for :root. */
export function toCssVariables(tokens: StyleTokens): string {
  const lines: string[] = [];
  for (const [name, value] of Object.entries(tokens.colors)) {
    lines.push(`--color-${name}: ${value};`);
  }
  for (const [name, value] of Object.entries(tokens.severity_colors)) {
    lines.push(`--sev-${name}: ${value};`);
  }
  for (const [name, value] of Object.entries(tokens.state_colors)) {
    lines.push(`--state-${name}: ${value};`);
  }
  for (const [name, value] of Object.entries(tokens.fonts)) {
    lines.push(`--font-${name}: ${value};`);
  }
  tokens.spacing.forEach((value, i) => lines.push(`--space-${i}: ${value}px;`));
  return `:root {\n  ${lines.join("\n  ")}\n}`;
}

export function severityVar(severity: string): string {
  return `var(--sev-${severity})`;
}

export function stateVar(state: string): string {
  return `var(--state-${state})`;
}
