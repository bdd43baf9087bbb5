import { describe, expect, it } from "vitest";

import {
  buildRequest,
  clampToRange,
  extendRange,
  sliderRanges,
  type ServiceMeta,
} from "../src/types.js";

const meta: ServiceMeta = {
  num_exp: 3,
  pose_dims: 7,
  stats: {
    beta_exp_min: [-0.5, -0.4, -0.6],
    beta_exp_max: [0.5, 0.6, 0.4],
    pose_min: [-0.2, -0.45, -0.1, -0.05, -0.04, -0.05, 0],
    pose_max: [0.2, 0.45, 0.1, 0.05, 0.04, 0.05, 0.44],
  },
  default_camera: null,
  presets: [],
  resolution_limits: [16, 256],
  train_resolution: [64, 64],
  step: 1000,
  mode: "C",
};

describe("slider ranges", () => {
  it("extends observed ranges by 20%", () => {
    const r = extendRange(-0.5, 0.5);
    expect(r.min).toBeCloseTo(-0.7);
    expect(r.max).toBeCloseTo(0.7);
  });

  it("gives degenerate ranges some width", () => {
    const r = extendRange(0, 0);
    expect(r.max - r.min).toBeGreaterThan(0);
  });

  it("keeps the jaw inside its hinge limits", () => {
    const { pose } = sliderRanges(meta);
    expect(pose[6].min).toBeGreaterThanOrEqual(0);
    expect(pose[6].max).toBeLessThanOrEqual(Math.PI / 2);
    expect(pose).toHaveLength(7);
  });

  it("clamps values beyond the extended bound", () => {
    const { betaExp } = sliderRanges(meta);
    expect(clampToRange(5.0, betaExp[0])).toBeCloseTo(betaExp[0].max);
    expect(clampToRange(-5.0, betaExp[0])).toBeCloseTo(betaExp[0].min);
  });
});

describe("request construction", () => {
  const orbit = { azimuth: 10, elevation: 5, radius: 3 };

  it("builds a valid request with correct dimensions", () => {
    const req = buildRequest(meta, [0.1, 0, -0.2], [0, 0, 0, 0, 0, 0, 0.2], orbit, 96, "color", 0);
    expect(req.beta_exp).toHaveLength(3);
    expect(req.beta_pose).toHaveLength(7);
    expect(req.resolution).toBe(96);
    expect(req.maps).toEqual({});
  });

  it("selects exactly one map for non-color views", () => {
    const req = buildRequest(meta, [0, 0, 0], [0, 0, 0, 0, 0, 0, 0], orbit, 96, "dhat", 0);
    expect(req.maps).toEqual({ dhat: true });
  });

  it("clamps resolution and jaw into service limits", () => {
    const req = buildRequest(meta, [0, 0, 0], [0, 0, 0, 0, 0, 0, 9], orbit, 4096, "color", 0);
    expect(req.resolution).toBe(256);
    expect(req.beta_pose[6]).toBeCloseTo(Math.PI / 2);
    const req2 = buildRequest(meta, [0, 0, 0], [0, 0, 0, 0, 0, 0, -1], orbit, 2, "color", 0);
    expect(req2.resolution).toBe(16);
    expect(req2.beta_pose[6]).toBe(0);
  });

  it("rejects wrong expression dimensionality", () => {
    expect(() =>
      buildRequest(meta, [0, 0], [0, 0, 0, 0, 0, 0, 0], orbit, 96, "color", 0),
    ).toThrow(/expression/);
  });

  it("zero-parameter request is all zeros", () => {
    const req = buildRequest(meta, [0, 0, 0], [0, 0, 0, 0, 0, 0, 0], orbit, 64, "color", 0);
    expect(req.beta_exp.every((v) => v === 0)).toBe(true);
    expect(req.beta_pose.every((v) => v === 0)).toBe(true);
  });
});
