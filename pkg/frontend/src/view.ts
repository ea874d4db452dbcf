/** Pure view functions: SessionView in, HTML string out. */

import { EstimateEdge, EstimateSummary } from "./api.js";
import { SessionView } from "./session.js";

/** Edges at or below this confidence are left out of the panel. */
export const CONFIDENCE_FLOOR = 0.5;

function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

export function visibleEdges(edges: EstimateEdge[]): EstimateEdge[] {
  return edges.filter(([, , confidence]) => confidence >= CONFIDENCE_FLOOR);
}

/** Map confidence in [0.5, 1] onto opacity in [0.4, 1] for shading. */
export function shadeOpacity(confidence: number): number {
  const clamped = Math.min(1, Math.max(CONFIDENCE_FLOOR, confidence));
  return Math.round((0.4 + 1.2 * (clamped - CONFIDENCE_FLOOR)) * 100) / 100;
}

export function renderEstimatePanel(estimate: EstimateSummary | undefined): string {
  if (!estimate || visibleEdges(estimate.edges).length === 0) {
    return '<section class="estimate"><p class="empty">No edges above confidence 0.5 yet.</p></section>';
  }
  const items = visibleEdges(estimate.edges)
    .map(
      ([u, v, confidence]) =>
        `<li style="opacity:${shadeOpacity(confidence)}">` +
        `${escapeHtml(u)} &rarr; ${escapeHtml(v)} ` +
        `<span class="confidence">${confidence.toFixed(2)}</span></li>`,
    )
    .join("");
  return `<section class="estimate"><ul>${items}</ul></section>`;
}

function renderWidget(view: SessionView): string {
  const widget = view.widget;
  if (!widget) return "";
  const disabled = view.status === "submitting" ? " disabled" : "";
  if (widget.kind === "ternary") {
    const [a, b] = widget.pair.map(escapeHtml);
    return (
      '<div class="widget ternary">' +
      `<button data-value="1"${disabled}>${a} &rarr; ${b}</button>` +
      `<button data-value="0"${disabled}>none</button>` +
      `<button data-value="-1"${disabled}>${a} &larr; ${b}</button>` +
      "</div>"
    );
  }
  return (
    '<div class="widget slider">' +
    `<label>&minus;10&hellip;+10</label>` +
    `<input type="range" min="${widget.min}" max="${widget.max}" step="1" value="0"${disabled}>` +
    `<button data-role="submit"${disabled}>submit</button>` +
    "</div>"
  );
}

const EXAMPLE_PANEL =
  '<aside class="examples">Generic example: for the pair (rain, wet pavement) ' +
  "a causal answer points from rain to wet pavement. The original survey " +
  "examples are unavailable; this illustration is a stand-in.</aside>";

export function render(view: SessionView): string {
  switch (view.status) {
    case "idle":
      return '<div class="idle"><button data-role="start">start session</button></div>';
    case "starting":
      return '<div class="starting">contacting the service&hellip;</div>';
    case "error":
      return (
        '<div class="banner error">' +
        `<p>${escapeHtml(view.errorMessage ?? "service unreachable")}</p>` +
        '<button data-role="retry">retry</button></div>'
      );
    case "done":
      return (
        '<div class="completion"><h2>Session complete</h2>' +
        `<p>${view.estimate?.answered ?? 0} questions answered.</p>` +
        renderEstimatePanel(view.estimate) +
        "</div>"
      );
    case "question":
    case "submitting": {
      const range = view.rangeMessage
        ? `<p class="range-message">${escapeHtml(view.rangeMessage)}</p>`
        : "";
      return (
        '<div class="session">' +
        `<p class="budget">remaining: ${view.remaining ?? "?"}</p>` +
        `<p class="question">${escapeHtml(view.questionText ?? "")}</p>` +
        renderWidget(view) +
        range +
        EXAMPLE_PANEL +
        renderEstimatePanel(view.estimate) +
        "</div>"
      );
    }
  }
}
