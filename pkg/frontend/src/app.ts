/** The viewer page: sliders for every expression coefficient, the head pose
 * and jaw, orbit camera controls, view toggles, presets, and a live preview
 * fed through the debounced single-flight scheduler. */

import { fetchHealth, fetchMeta, postRender } from "./api.js";
import { createButton, createSection, createSlider, type SliderHandle } from "./controls.js";
import { RenderScheduler } from "./scheduler.js";
import {
  buildRequest,
  sliderRanges,
  type OrbitSpec,
  type RenderRequest,
  type ServiceMeta,
  type ViewName,
} from "./types.js";

const PREVIEW_RESOLUTION = 96;
const SNAPSHOT_RESOLUTION = 256;
const POSE_NAMES = ["rot x", "rot y", "rot z", "shift x", "shift y", "shift z", "jaw"];
const VIEWS: ViewName[] = ["color", "depth", "ddelta", "dhat"];
const VIEW_LABELS: Record<ViewName, string> = {
  color: "color",
  depth: "depth",
  ddelta: "|residual|",
  dhat: "|deformation|",
};

export async function viewerApp(serviceUrl: string, mount: HTMLElement): Promise<void> {
  mount.textContent = "";
  const banner = document.createElement("div");
  banner.className = "banner";
  mount.append(banner);

  let meta: ServiceMeta;
  try {
    meta = await fetchMeta(serviceUrl);
  } catch (err) {
    showRetryBanner(banner, serviceUrl, mount, err);
    return;
  }
  banner.remove();
  buildUi(serviceUrl, mount, meta);
}

function showRetryBanner(
  banner: HTMLElement,
  serviceUrl: string,
  mount: HTMLElement,
  err: unknown,
): void {
  banner.textContent = `render service unreachable at ${serviceUrl} (${String(err)}) `;
  banner.classList.add("banner-error");
  banner.append(
    createButton("retry", () => {
      void viewerApp(serviceUrl, mount);
    }),
  );
}

function buildUi(serviceUrl: string, mount: HTMLElement, meta: ServiceMeta): void {
  const ranges = sliderRanges(meta);
  let view: ViewName = "color";
  let seed = 0;

  const preview = document.createElement("img");
  preview.className = "preview";
  preview.width = 384;
  preview.height = 384;
  const status = document.createElement("div");
  status.className = "status";
  status.textContent = `checkpoint at step ${meta.step}, mode ${meta.mode}`;

  const scheduler = new RenderScheduler<RenderRequest>(
    (req) => postRender(serviceUrl, req),
    (result) => {
      const url = URL.createObjectURL(result.blob);
      const old = preview.src;
      preview.src = url;
      if (old.startsWith("blob:")) URL.revokeObjectURL(old);
      status.textContent = `render ${result.millis.toFixed(0)} ms  |  state ${scheduler.state}`;
    },
    (err) => {
      status.textContent = `render error: ${String(err)}`;
      void fetchHealth(serviceUrl).then((ok) => {
        if (!ok) {
          setDisabled(true);
          showRetryBanner(bannerSlot, serviceUrl, mount, "connection lost");
        }
      });
    },
  );

  const betaSliders: SliderHandle[] = ranges.betaExp.map((r, i) =>
    createSlider(`expr ${i}`, r, 0, push),
  );
  const poseSliders: SliderHandle[] = ranges.pose.map((r, i) =>
    createSlider(POSE_NAMES[i], r, i === 6 ? Math.max(0, r.min) : 0, push),
  );
  const orbitSliders = [
    createSlider("azimuth", { min: -180, max: 180 }, 0, push),
    createSlider("elevation", { min: -80, max: 80 }, 8, push),
    createSlider("radius", { min: 1.5, max: 8 }, 3.2, push),
  ];

  function currentOrbit(): OrbitSpec {
    return {
      azimuth: orbitSliders[0].get(),
      elevation: orbitSliders[1].get(),
      radius: orbitSliders[2].get(),
    };
  }

  function currentRequest(resolution = PREVIEW_RESOLUTION): RenderRequest {
    return buildRequest(
      meta,
      betaSliders.map((s) => s.get()),
      poseSliders.map((s) => s.get()),
      currentOrbit(),
      resolution,
      view,
      seed,
    );
  }

  function push(): void {
    scheduler.request(currentRequest());
  }

  function pushNow(): void {
    scheduler.requestNow(currentRequest());
  }

  const viewButtons = VIEWS.map((v) => {
    const b = createButton(VIEW_LABELS[v], () => {
      view = v;
      viewButtons.forEach((vb) => vb.classList.toggle("active", vb === b));
      pushNow();
    });
    if (v === view) b.classList.add("active");
    return b;
  });

  const resetButton = createButton("reset to neutral", () => {
    betaSliders.forEach((s) => s.set(0));
    poseSliders.forEach((s, i) => s.set(i === 6 ? 0 : 0));
    pushNow();
  });

  const presetButtons = meta.presets.map((p) =>
    createButton(`frame ${p.frame}`, () => {
      p.beta_exp.forEach((v, i) => betaSliders[i]?.set(v));
      const pose = [...p.rotation, ...p.translation, p.jaw];
      pose.forEach((v, i) => poseSliders[i]?.set(v));
      pushNow();
    }),
  );

  const snapshotButton = createButton("full-resolution snapshot", () => {
    scheduler.requestNow(currentRequest(SNAPSHOT_RESOLUTION));
  });

  const seedInput = createSlider("seed", { min: 0, max: 99 }, 0, () => {
    seed = Math.round(seedInput.get());
    push();
  });

  const bannerSlot = document.createElement("div");
  const panel = document.createElement("div");
  panel.className = "panel";
  panel.append(
    createSection("expression", betaSliders.map((s) => s.root)),
    createSection("head pose", poseSliders.map((s) => s.root)),
    createSection("camera orbit", orbitSliders.map((s) => s.root)),
    createSection("view", [...viewButtons]),
    createSection("presets", [resetButton, ...presetButtons, snapshotButton, seedInput.root]),
  );
  const stage = document.createElement("div");
  stage.className = "stage";
  stage.append(preview, status);
  mount.append(bannerSlot, panel, stage);

  function setDisabled(disabled: boolean): void {
    [...betaSliders, ...poseSliders, ...orbitSliders, seedInput].forEach((s) =>
      s.setDisabled(disabled),
    );
    [...viewButtons, resetButton, snapshotButton, ...presetButtons].forEach(
      (b) => (b.disabled = disabled),
    );
  }

  pushNow();
}
