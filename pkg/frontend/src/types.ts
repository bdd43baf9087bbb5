/** Wire types for the render service plus request construction helpers. */

export interface OrbitSpec {
  azimuth: number;
  elevation: number;
  radius: number;
  look_at?: [number, number, number];
}

export type MapName = "depth" | "ddelta" | "dhat";
export type ViewName = "color" | MapName;

export interface RenderRequest {
  beta_exp: number[];
  beta_pose: number[]; // rx, ry, rz, tx, ty, tz, jaw
  camera?: { orbit: OrbitSpec };
  resolution: number;
  seed: number;
  maps: Partial<Record<MapName, boolean>>;
}

export interface ServiceMeta {
  num_exp: number;
  pose_dims: number;
  stats: {
    beta_exp_min?: number[];
    beta_exp_max?: number[];
    pose_min?: number[];
    pose_max?: number[];
  };
  default_camera: Record<string, unknown> | null;
  presets: Array<{
    frame: number;
    beta_exp: number[];
    rotation: number[];
    translation: number[];
    jaw: number;
  }>;
  resolution_limits: [number, number];
  train_resolution: [number, number];
  step: number;
  mode: string;
}

export interface SliderRange {
  min: number;
  max: number;
}

const JAW_MAX = Math.PI / 2;

/** Slider bounds: observed training range extended by 20% each way. */
export function extendRange(lo: number, hi: number): SliderRange {
  const span = hi - lo;
  const pad = span > 0 ? 0.2 * span : 0.25;
  return { min: lo - pad, max: hi + pad };
}

export function sliderRanges(meta: ServiceMeta): {
  betaExp: SliderRange[];
  pose: SliderRange[];
} {
  const n = meta.num_exp;
  const bmin = meta.stats.beta_exp_min ?? new Array(n).fill(-1);
  const bmax = meta.stats.beta_exp_max ?? new Array(n).fill(1);
  const pmin = meta.stats.pose_min ?? new Array(7).fill(-0.5);
  const pmax = meta.stats.pose_max ?? new Array(7).fill(0.5);
  const betaExp = bmin.map((lo, i) => extendRange(lo, bmax[i]));
  const pose = pmin.map((lo, i) => extendRange(lo, pmax[i]));
  // the jaw hinge only articulates in [0, pi/2]
  pose[6] = {
    min: Math.max(0, pose[6].min),
    max: Math.min(JAW_MAX, Math.max(pose[6].max, 0.05)),
  };
  return { betaExp, pose };
}

export function clampToRange(value: number, range: SliderRange): number {
  return Math.min(Math.max(value, range.min), range.max);
}

/** The request is kept valid by construction: dimensions from /meta, jaw and
 * resolution clamped to the service's accepted ranges. */
export function buildRequest(
  meta: ServiceMeta,
  betaExp: number[],
  pose: number[],
  orbit: OrbitSpec,
  resolution: number,
  view: ViewName,
  seed: number,
): RenderRequest {
  if (betaExp.length !== meta.num_exp) {
    throw new Error(`expression vector must have ${meta.num_exp} entries`);
  }
  if (pose.length !== 7) {
    throw new Error("pose vector must have 7 entries");
  }
  const [rmin, rmax] = meta.resolution_limits;
  const maps: RenderRequest["maps"] = {};
  if (view !== "color") {
    maps[view] = true;
  }
  const jaw = Math.min(Math.max(pose[6], 0), JAW_MAX);
  return {
    beta_exp: betaExp.slice(),
    beta_pose: [...pose.slice(0, 6), jaw],
    camera: { orbit: { ...orbit } },
    resolution: Math.round(Math.min(Math.max(resolution, rmin), rmax)),
    seed,
    maps,
  };
}
