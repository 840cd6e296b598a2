// Browser bootstrap: the only file that touches the DOM.

import { DashboardController } from "./controller.js";

function mount(): void {
  const root = document.getElementById("app");
  if (!root) {
    throw new Error("missing #app container");
  }
  const controller = new DashboardController({
    onRender: (html) => {
      root.innerHTML = html;
    },
  });
  root.addEventListener("click", (event) => {
    const target = (event.target as HTMLElement).closest<HTMLElement>("[data-action]");
    if (!target) {
      return;
    }
    const action = target.dataset.action ?? "";
    void controller.dispatch(action, { ...target.dataset });
  });
  void controller.start();
}

document.addEventListener("DOMContentLoaded", mount);
