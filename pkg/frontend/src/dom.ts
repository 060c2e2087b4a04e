/**
 * Narrow DOM surface the console renders through. The browser's document
 * satisfies it structurally; tests substitute a stub so rendering stays
 * verifiable without a browser.
 */

export interface El {
  textContent: string | null;
  className: string;
  value?: string;
  disabled?: boolean;
  setAttribute(name: string, value: string): void;
  appendChild(child: El): unknown;
  addEventListener(type: string, handler: (ev?: any) => void): void;
  replaceChildren(...children: El[]): void;
  remove(): void;
}

export interface Doc {
  createElement(tag: string): El;
}

export function h(
  doc: Doc,
  tag: string,
  attrs: Record<string, string> = {},
  ...children: (El | string)[]
): El {
  const el = doc.createElement(tag);
  for (const [name, value] of Object.entries(attrs)) {
    if (name === "class") el.className = value;
    else el.setAttribute(name, value);
  }
  for (const child of children) {
    if (typeof child === "string") {
      const span = doc.createElement("span");
      span.textContent = child;
      el.appendChild(span);
    } else {
      el.appendChild(child);
    }
  }
  return el;
}
