// Pure view logic: everything here maps API payloads to display structures
// and HTML strings without touching the DOM or recomputing any score.

import type {
  BucketEvidence,
  InstanceView,
  NeighborsPayload,
  QueueItem,
  ServiceStats,
} from "./api.js";

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;")
    .replace(/'/g, "&#039;");
}

/** Evidence-panel similarities: three decimals, mirroring the API values. */
export function formatSimilarity(value: number): string {
  return value.toFixed(3);
}

/** Queue best-match scores: two decimals (1.00 for an exact twin). */
export function formatBest(value: number | null): string {
  return value === null ? "—" : value.toFixed(2);
}

// -- sentence highlighting ---------------------------------------------------

export type SegmentRole = "text" | "e1" | "e2";

export interface SentenceSegment {
  tokens: string[];
  role: SegmentRole;
  entityType?: string;
}

/**
 * Split a sentence into consecutive runs of plain/e1/e2 tokens.  The runs
 * cover every token exactly once, in order, so the rendered sentence is the
 * original one with the two target spans wrapped.
 */
export function sentenceSegments(view: InstanceView): SentenceSegment[] {
  const roleOf = (index: number): SegmentRole => {
    if (index >= view.e1_span[0] && index < view.e1_span[1]) return "e1";
    if (index >= view.e2_span[0] && index < view.e2_span[1]) return "e2";
    return "text";
  };
  const segments: SentenceSegment[] = [];
  for (let i = 0; i < view.tokens.length; i++) {
    const role = roleOf(i);
    const last = segments[segments.length - 1];
    if (last && last.role === role) {
      last.tokens.push(view.tokens[i]!);
    } else {
      segments.push({
        tokens: [view.tokens[i]!],
        role,
        entityType: role === "e1" ? view.e1_type : role === "e2" ? view.e2_type : undefined,
      });
    }
  }
  return segments;
}

export function renderSentence(view: InstanceView): string {
  return sentenceSegments(view)
    .map((segment) => {
      const text = escapeHtml(segment.tokens.join(" "));
      if (segment.role === "text") {
        return text;
      }
      const type = escapeHtml(segment.entityType ?? "");
      return `<mark class="entity ${segment.role}">${text}<sup>${type}</sup></mark>`;
    })
    .join(" ");
}

// -- label hotkeys -------------------------------------------------------------

export interface Hotkey {
  key: string;
  label: string;
}

/** Number keys 1–9 then 0 map to the first ten labels in inventory order. */
export function labelHotkeys(labels: string[]): Hotkey[] {
  const keys = ["1", "2", "3", "4", "5", "6", "7", "8", "9", "0"];
  return labels.slice(0, keys.length).map((label, i) => ({ key: keys[i]!, label }));
}

export function labelForKey(hotkeys: Hotkey[], key: string): string | null {
  const hit = hotkeys.find((hk) => hk.key === key);
  return hit ? hit.label : null;
}

// -- queue bookkeeping ---------------------------------------------------------

export interface RemovedItem {
  item: QueueItem;
  index: number;
}

/** Optimistically drop a row; the result lets a failed submit restore it. */
export function removeItem(items: QueueItem[], id: string): { items: QueueItem[]; removed: RemovedItem | null } {
  const index = items.findIndex((item) => item.id === id);
  if (index === -1) {
    return { items, removed: null };
  }
  const next = items.slice(0, index).concat(items.slice(index + 1));
  return { items: next, removed: { item: items[index]!, index } };
}

export function restoreItem(items: QueueItem[], removed: RemovedItem): QueueItem[] {
  const next = items.slice();
  next.splice(Math.min(removed.index, next.length), 0, removed.item);
  return next;
}

// -- evidence panel -------------------------------------------------------------

export interface NeighborViewRow {
  id: string;
  similarity: number;
  similarityText: string;
  pattern: string | null;
  label: string;
}

export interface BucketViewModel {
  bucket: string;
  label: string;
  mean: number;
  meanText: string;
  best: number;
  bestText: string;
  neighbors: NeighborViewRow[];
}

export interface EvidencePanelModel {
  id: string;
  pattern: string;
  variant: string;
  usedFallback: boolean;
  k: number;
  suggestedLabel: string | null;
  buckets: BucketViewModel[];
}

/**
 * The display model is a renaming of the API payload: same bucket order,
 * same neighbor order, same numbers (plus their fixed-precision text forms).
 */
export function evidencePanelModel(payload: NeighborsPayload): EvidencePanelModel {
  return {
    id: payload.id,
    pattern: payload.pattern,
    variant: payload.variant,
    usedFallback: payload.used_fallback,
    k: payload.k,
    suggestedLabel: payload.suggested_label ?? null,
    buckets: payload.buckets.map((bucket: BucketEvidence) => ({
      bucket: bucket.bucket,
      label: bucket.label,
      mean: bucket.mean_similarity,
      meanText: formatSimilarity(bucket.mean_similarity),
      best: bucket.best_similarity,
      bestText: formatSimilarity(bucket.best_similarity),
      neighbors: bucket.neighbors.map((neighbor) => ({
        id: neighbor.id,
        similarity: neighbor.similarity,
        similarityText: formatSimilarity(neighbor.similarity),
        pattern: neighbor.pattern,
        label: neighbor.label,
      })),
    })),
  };
}

// -- HTML fragments --------------------------------------------------------------

export function renderQueueRow(item: QueueItem, selected: boolean): string {
  const score =
    item.best_similarity === null
      ? `<span class="badge novel">no evidence yet</span>`
      : `<span class="score">${formatBest(item.best_similarity)}</span>`;
  const suggestion = item.suggested_label
    ? `<span class="badge suggestion">${escapeHtml(item.suggested_label)}</span>`
    : "";
  return `<li class="queue-row${selected ? " selected" : ""}" data-id="${escapeHtml(item.id)}">
    <span class="row-id">${escapeHtml(item.id)}</span>
    ${suggestion}
    ${score}
  </li>`;
}

export function renderEvidencePanel(model: EvidencePanelModel): string {
  const fallback = model.usedFallback
    ? `<span class="badge fallback">sentence fallback</span>`
    : "";
  const suggestion = model.suggestedLabel
    ? `<p class="suggested">suggested: <strong>${escapeHtml(model.suggestedLabel)}</strong></p>`
    : "";
  const buckets = model.buckets
    .map(
      (bucket) => `<section class="bucket">
      <h4>${escapeHtml(bucket.bucket)} <span class="score">mean ${bucket.meanText} · best ${bucket.bestText}</span></h4>
      <ul>${bucket.neighbors
        .map(
          (neighbor) => `<li>
          <span class="score">${neighbor.similarityText}</span>
          <span class="neighbor-id">${escapeHtml(neighbor.id)}</span>
          <span class="pattern">${escapeHtml(neighbor.pattern ?? "")}</span>
        </li>`,
        )
        .join("")}</ul>
    </section>`,
    )
    .join("");
  return `<div class="evidence">
    <p class="pattern-line">query pattern <code>${escapeHtml(model.pattern)}</code>
      <span class="badge variant">${escapeHtml(model.variant)}</span> ${fallback}</p>
    ${suggestion}
    ${buckets || `<p class="empty">no indexed neighbors for this instance yet</p>`}
  </div>`;
}

export function renderStatsBar(stats: ServiceStats): string {
  const perClass = Object.entries(stats.labels_per_class)
    .map(([label, count]) => `${escapeHtml(label)}: ${count}`)
    .join(" · ");
  return `<span>pool <strong>${stats.pool_size}</strong></span>
    <span>labeled <strong>${stats.labeled_count}</strong></span>
    <span>fallback ${(stats.fallback_rate * 100).toFixed(1)}%</span>
    <span>v${stats.version}</span>
    ${perClass ? `<span class="per-class">${perClass}</span>` : ""}`;
}

export function renderLabelButtons(hotkeys: Hotkey[], noRelation: string): string {
  return hotkeys
    .map(
      (hk) => `<button class="label-btn${hk.label === noRelation ? " no-relation" : ""}" data-label="${escapeHtml(hk.label)}">
      <kbd>${hk.key}</kbd> ${escapeHtml(hk.label)}
    </button>`,
    )
    .join("");
}
