/** Browser entry point: same-origin service, session from ?session= or the
 * server's session list. */

import { firstSessionId, LabelApi } from "./api.js";
import { initApp } from "./app.js";

async function boot(): Promise<void> {
  const baseUrl = window.location.origin;
  const params = new URLSearchParams(window.location.search);
  const sessionId = params.get("session") ?? (await firstSessionId(baseUrl));
  await initApp({ doc: document, api: new LabelApi(baseUrl, sessionId) });
}

boot().catch((err) => {
  const note = document.getElementById("note");
  if (note) {
    note.textContent = `failed to start: ${err}`;
  }
});
