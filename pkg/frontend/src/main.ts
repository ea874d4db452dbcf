/** Browser entry point: wire the controller to a root element. */

import { SessionClient, Protocol } from "./api.js";
import { SessionController } from "./session.js";
import { render } from "./view.js";

export interface MountOptions {
  baseUrl: string;
  token?: string;
  protocol?: Protocol;
  budget?: number;
  seed?: number;
}

export function mount(root: HTMLElement, options: MountOptions): SessionController {
  const client = new SessionClient({ baseUrl: options.baseUrl, token: options.token });
  const controller = new SessionController(client, options.protocol ?? "edge");

  const draw = () => {
    root.innerHTML = render(controller.view);
  };
  controller.subscribe(draw);
  draw();

  root.addEventListener("click", (event) => {
    const target = event.target as HTMLElement;
    if (!(target instanceof HTMLButtonElement)) return;
    const role = target.dataset.role;
    if (role === "start") {
      void controller.start({ budget: options.budget ?? 28, seed: options.seed });
    } else if (role === "retry") {
      void controller.retry();
    } else if (role === "submit") {
      const slider = root.querySelector<HTMLInputElement>('input[type="range"]');
      if (slider) void controller.answer(parseInt(slider.value, 10));
    } else if (target.dataset.value !== undefined) {
      void controller.answer(parseInt(target.dataset.value, 10));
    }
  });

  return controller;
}
