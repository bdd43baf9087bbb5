/** Small DOM factories: labelled sliders and button rows. */

import { clampToRange, type SliderRange } from "./types.js";

export interface SliderHandle {
  root: HTMLElement;
  input: HTMLInputElement;
  get(): number;
  set(value: number): void;
  setDisabled(disabled: boolean): void;
}

export function createSlider(
  name: string,
  range: SliderRange,
  initial: number,
  onchange: () => void,
): SliderHandle {
  const root = document.createElement("label");
  root.className = "slider";
  const caption = document.createElement("span");
  caption.className = "slider-name";
  caption.textContent = name;
  const value = document.createElement("span");
  value.className = "slider-value";
  const input = document.createElement("input");
  input.type = "range";
  input.min = String(range.min);
  input.max = String(range.max);
  input.step = String((range.max - range.min) / 200 || 0.01);
  input.value = String(clampToRange(initial, range));
  value.textContent = Number(input.value).toFixed(2);
  input.addEventListener("input", () => {
    value.textContent = Number(input.value).toFixed(2);
    onchange();
  });
  root.append(caption, input, value);
  return {
    root,
    input,
    get: () => Number(input.value),
    set: (v) => {
      input.value = String(clampToRange(v, range));
      value.textContent = Number(input.value).toFixed(2);
    },
    setDisabled: (d) => {
      input.disabled = d;
    },
  };
}

export function createSection(title: string, children: HTMLElement[]): HTMLElement {
  const box = document.createElement("fieldset");
  box.className = "section";
  const legend = document.createElement("legend");
  legend.textContent = title;
  box.append(legend, ...children);
  return box;
}

export function createButton(label: string, onclick: () => void): HTMLButtonElement {
  const b = document.createElement("button");
  b.textContent = label;
  b.addEventListener("click", onclick);
  return b;
}
