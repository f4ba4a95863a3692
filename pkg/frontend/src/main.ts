import { ApiClient } from "./api.js";
import { AppController } from "./app.js";
import { DomView } from "./view.js";

const annotator =
  new URLSearchParams(window.location.search).get("annotator") ?? "anon";
const api = new ApiClient("", annotator);
const controller = new AppController(api, new DomView());

for (const button of document.querySelectorAll<HTMLButtonElement>(
  "button[data-decision]",
)) {
  button.addEventListener("click", () => {
    void controller.submit(button.dataset.decision as never);
  });
}

window.addEventListener("keydown", (ev) => {
  if (ev.key === "1" || ev.key === "2" || ev.key === "3") {
    void controller.submitByIndex(parseInt(ev.key, 10));
  }
});

void controller.start();
