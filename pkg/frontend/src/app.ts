// DOM wiring for the annotation console.  All data flows through ApiClient;
// all rendering goes through the pure helpers in model.ts.

import { ApiClient, ApiError, type QueueItem } from "./api.js";
import {
  escapeHtml,
  labelForKey,
  labelHotkeys,
  removeItem,
  restoreItem,
  type Hotkey,
  type RemovedItem,
  evidencePanelModel,
  renderEvidencePanel,
  renderLabelButtons,
  renderQueueRow,
  renderSentence,
  renderStatsBar,
} from "./model.js";

const STALE_POLL_MS = 5000;

interface AppState {
  mode: "explore" | "exploit";
  limit: number;
  k: number;
  items: QueueItem[];
  selectedId: string | null;
  hotkeys: Hotkey[];
  noRelation: string;
  seenVersion: number;
  stale: boolean;
  pendingRestore: RemovedItem | null;
}

export function startApp(root: HTMLElement, client = new ApiClient()): { refresh: () => Promise<void> } {
  const state: AppState = {
    mode: "explore",
    limit: 20,
    k: 5,
    items: [],
    selectedId: null,
    hotkeys: [],
    noRelation: "no_relation",
    seenVersion: -1,
    stale: false,
    pendingRestore: null,
  };

  root.innerHTML = `
    <header>
      <h1>annotation queue</h1>
      <div id="stats" class="stats"></div>
    </header>
    <div id="banner" class="banner" hidden></div>
    <div class="controls">
      <div class="mode-toggle" role="group">
        <button id="mode-explore" class="mode active">explore</button>
        <button id="mode-exploit" class="mode">exploit</button>
      </div>
      <label>rows <input id="limit" type="number" min="1" max="200" value="20"></label>
      <label>k <input id="k-slider" type="range" min="1" max="20" value="5">
        <span id="k-value">5</span></label>
      <button id="refresh">refresh</button>
    </div>
    <main>
      <ul id="queue" class="queue"></ul>
      <section id="detail" class="detail"><p class="empty">select an instance</p></section>
    </main>
    <footer id="label-bar" class="label-bar" hidden></footer>
  `;

  const el = {
    stats: root.querySelector("#stats") as HTMLElement,
    banner: root.querySelector("#banner") as HTMLElement,
    queue: root.querySelector("#queue") as HTMLElement,
    detail: root.querySelector("#detail") as HTMLElement,
    labelBar: root.querySelector("#label-bar") as HTMLElement,
    limit: root.querySelector("#limit") as HTMLInputElement,
    kSlider: root.querySelector("#k-slider") as HTMLInputElement,
    kValue: root.querySelector("#k-value") as HTMLElement,
    modeExplore: root.querySelector("#mode-explore") as HTMLButtonElement,
    modeExploit: root.querySelector("#mode-exploit") as HTMLButtonElement,
    refresh: root.querySelector("#refresh") as HTMLButtonElement,
  };

  function showBanner(text: string, kind: "error" | "stale") {
    el.banner.hidden = false;
    el.banner.className = `banner ${kind}`;
    el.banner.innerHTML =
      kind === "stale"
        ? `${escapeHtml(text)} <button id="banner-refresh">refresh now</button>`
        : escapeHtml(text);
    const refreshBtn = el.banner.querySelector("#banner-refresh");
    if (refreshBtn) {
      refreshBtn.addEventListener("click", () => void refresh());
    }
  }

  function clearBanner() {
    el.banner.hidden = true;
    el.banner.textContent = "";
  }

  function renderQueue() {
    el.queue.innerHTML = state.items
      .map((item) => renderQueueRow(item, item.id === state.selectedId))
      .join("");
  }

  async function refreshStats() {
    const stats = await client.stats();
    el.stats.innerHTML = renderStatsBar(stats);
    state.seenVersion = stats.version;
    state.stale = false;
  }

  async function refresh(): Promise<void> {
    try {
      const [queue, labels] = await Promise.all([
        client.queue(state.mode, state.limit),
        client.labels(),
      ]);
      state.items = queue.items;
      state.hotkeys = labelHotkeys(labels.all);
      state.noRelation = labels.no_relation;
      await refreshStats();
      clearBanner();
      renderQueue();
      el.labelBar.innerHTML = renderLabelButtons(state.hotkeys, state.noRelation);
      el.labelBar.hidden = state.selectedId === null;
    } catch (error) {
      if (error instanceof ApiError && error.unreachable) {
        showBanner("service unreachable — is `pkre serve` running?", "error");
      } else {
        showBanner(`failed to load queue: ${String(error)}`, "error");
      }
    }
  }

  async function showDetail(id: string) {
    state.selectedId = id;
    renderQueue();
    el.labelBar.hidden = false;
    try {
      const [view, neighbors] = await Promise.all([
        client.instance(id),
        client.neighbors(id, state.k),
      ]);
      el.detail.innerHTML = `
        <h3>${escapeHtml(view.id)}</h3>
        <p class="sentence">${renderSentence(view)}</p>
        ${renderEvidencePanel(evidencePanelModel(neighbors))}
      `;
    } catch (error) {
      el.detail.innerHTML = `<p class="error">${escapeHtml(String(error))}</p>`;
    }
  }

  async function submitLabel(label: string) {
    const id = state.selectedId;
    if (!id) {
      return;
    }
    // optimistic: drop the row now, restore it if the server rejects
    const { items, removed } = removeItem(state.items, id);
    state.items = items;
    state.pendingRestore = removed;
    state.selectedId = null;
    renderQueue();
    el.detail.innerHTML = `<p class="empty">submitting…</p>`;
    try {
      const receipt = await client.submitLabel(id, label);
      state.pendingRestore = null;
      el.detail.innerHTML = `<p class="ok">labeled <strong>${escapeHtml(receipt.id)}</strong>
        as <strong>${escapeHtml(receipt.label)}</strong>
        (bucket ${escapeHtml(receipt.bucket)} now ${receipt.new_bucket_size})</p>`;
      await refresh();
    } catch (error) {
      if (state.pendingRestore) {
        state.items = restoreItem(state.items, state.pendingRestore);
        state.pendingRestore = null;
        state.selectedId = id;
        renderQueue();
      }
      const detail = error instanceof ApiError ? error.message : String(error);
      el.detail.innerHTML = `<p class="error">${escapeHtml(detail)}</p>
        <button id="retry" data-label="${escapeHtml(label)}">retry</button>`;
      const retry = el.detail.querySelector("#retry");
      if (retry) {
        retry.addEventListener("click", () => void submitLabel(label));
      }
    }
  }

  function setMode(mode: "explore" | "exploit") {
    state.mode = mode;
    el.modeExplore.classList.toggle("active", mode === "explore");
    el.modeExploit.classList.toggle("active", mode === "exploit");
    void refresh();
  }

  el.modeExplore.addEventListener("click", () => setMode("explore"));
  el.modeExploit.addEventListener("click", () => setMode("exploit"));
  el.refresh.addEventListener("click", () => void refresh());
  el.limit.addEventListener("change", () => {
    const value = parseInt(el.limit.value, 10);
    if (Number.isFinite(value) && value > 0) {
      state.limit = value;
      void refresh();
    }
  });
  el.kSlider.addEventListener("input", () => {
    state.k = parseInt(el.kSlider.value, 10);
    el.kValue.textContent = el.kSlider.value;
    if (state.selectedId) {
      void showDetail(state.selectedId);
    }
  });

  el.queue.addEventListener("click", (event) => {
    const row = (event.target as HTMLElement).closest<HTMLElement>(".queue-row");
    if (row && row.dataset.id) {
      void showDetail(row.dataset.id);
    }
  });

  el.labelBar.addEventListener("click", (event) => {
    const button = (event.target as HTMLElement).closest<HTMLElement>(".label-btn");
    if (button && button.dataset.label) {
      void submitLabel(button.dataset.label);
    }
  });

  document.addEventListener("keydown", (event) => {
    if (event.target instanceof HTMLInputElement) {
      return;
    }
    const label = labelForKey(state.hotkeys, event.key);
    if (label && state.selectedId) {
      event.preventDefault();
      void submitLabel(label);
    }
  });

  // another session's labels bump the state version; prompt a refresh
  window.setInterval(async () => {
    try {
      const stats = await client.stats();
      if (state.seenVersion >= 0 && stats.version !== state.seenVersion && !state.stale) {
        state.stale = true;
        showBanner("queue is stale — another session submitted labels", "stale");
      }
    } catch {
      // transient poll failures surface on the next user action instead
    }
  }, STALE_POLL_MS);

  void refresh();
  return { refresh };
}

const rootElement = typeof document !== "undefined" ? document.getElementById("app") : null;
if (rootElement) {
  startApp(rootElement);
}
