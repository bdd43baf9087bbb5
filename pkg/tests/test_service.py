"""Render service: endpoints, validation, queueing, and CLI consistency."""

import concurrent.futures
import json
import urllib.error
import urllib.request

import numpy as np
import pytest

from rnrf.service import parse_render_request, start_server, RequestError


@pytest.fixture(scope="module")
def server(tiny_pipeline):
    srv, service = start_server(tiny_pipeline, port=0)
    host, port = srv.server_address
    yield f"http://{host}:{port}", tiny_pipeline
    srv.shutdown()
    service.close()


def get_json(url):
    with urllib.request.urlopen(url, timeout=30) as resp:
        return json.loads(resp.read()), dict(resp.headers)


def post(url, body, timeout=60):
    req = urllib.request.Request(
        url, data=json.dumps(body).encode(), headers={"Content-Type": "application/json"}
    )
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        return resp.status, resp.read(), dict(resp.headers)


def test_health(server):
    body, _ = get_json(server[0] + "/health")
    assert body == {"status": "ok"}


def test_meta_reports_dims_and_ranges(server, tiny_dataset):
    body, _ = get_json(server[0] + "/meta")
    assert body["num_exp"] == tiny_dataset.model.num_exp
    assert body["pose_dims"] == 7
    # ranges recomputed from the training manifest
    beta = tiny_dataset.beta_matrix()
    assert np.allclose(body["stats"]["beta_exp_min"], beta.min(axis=0), atol=1e-7)
    assert np.allclose(body["stats"]["beta_exp_max"], beta.max(axis=0), atol=1e-7)
    assert len(body["presets"]) >= 3
    assert body["default_camera"]["fx"] > 0
    assert body["resolution_limits"] == [16, 256]


def test_render_matches_cli_bytes(server, tmp_path):
    url, pipeline = server
    res = pipeline.meta["width"]
    status, png, headers = post(url + "/render", {"resolution": res, "seed": 0})
    assert status == 200
    assert "X-Render-Millis" in headers

    from rnrf.cli import main

    out = tmp_path / "cli"
    assert main(["render", "--ck", "UNUSED", "--out", str(out)]) != 0  # missing ck errors
    import rnrf.training as training

    ck = tmp_path / "ck.rnck"
    training.save_checkpoint(ck, pipeline)
    assert main(["render", "--ck", str(ck), "--out", str(out), "--params", "zero",
                 "--camera", "frame:0", "--size", str(res), "--seed", "0"]) == 0
    assert (out / "render.png").read_bytes() == png


def test_render_idempotent(server):
    url, _ = server
    body = {"resolution": 20, "seed": 4, "beta_pose": [0, 0.2, 0, 0, 0, 0, 0.1]}
    _, png1, _ = post(url + "/render", body)
    _, png2, _ = post(url + "/render", body)
    assert png1 == png2


def test_render_with_orbit_camera_and_maps(server):
    url, _ = server
    status, png, _ = post(url + "/render", {
        "resolution": 24, "seed": 1,
        "camera": {"orbit": {"azimuth": 30, "elevation": 10, "radius": 3.2}},
        "maps": {"depth": True},
    })
    assert status == 200
    assert png[:8] == b"\x89PNG\r\n\x1a\n"


def test_wrong_beta_dimension_is_400_naming_field(server):
    url, _ = server
    try:
        post(url + "/render", {"beta_exp": [0.1, 0.2]})  # model has 3 dims
        raise AssertionError("expected HTTP 400")
    except urllib.error.HTTPError as err:
        assert err.code == 400
        body = json.loads(err.read())
        assert body["field"] == "beta_exp"


def test_malformed_json_is_400(server):
    url, _ = server
    req = urllib.request.Request(url + "/render", data=b"{not json",
                                 headers={"Content-Type": "application/json"})
    try:
        urllib.request.urlopen(req, timeout=30)
        raise AssertionError("expected HTTP 400")
    except urllib.error.HTTPError as err:
        assert err.code == 400


def test_oversized_resolution_clamped_with_warning(server):
    url, _ = server
    status, _, headers = post(url + "/render", {"resolution": 4096, "seed": 0})
    assert status == 200
    assert headers.get("X-Resolution-Clamped") == "256"


def test_request_validation_unit():
    class FakePipe:
        class model:
            num_exp = 3

        meta = {"default_camera": {"fx": 10, "fy": 10, "cx": 8, "cy": 8,
                                   "rotation": list(np.eye(3).reshape(-1)),
                                   "origin": [0, 0, -3], "near": 0.5, "far": 9.0},
                "width": 20}

    with pytest.raises(RequestError) as err:
        parse_render_request({"beta_pose": [0, 0, 0, 0, 0, 0, 3.0]}, FakePipe)
    assert err.value.field == "beta_pose"
    with pytest.raises(RequestError):
        parse_render_request({"maps": {"bogus": True}}, FakePipe)
    req = parse_render_request({"resolution": 5}, FakePipe)
    assert req["resolution"] == 16 and req["clamped"]


def test_concurrent_requests_match_sequential(server):
    url, _ = server
    bodies = [{"resolution": 18, "seed": s} for s in range(5)] * 2
    sequential = [post(url + "/render", b)[1] for b in bodies[:5]]
    with concurrent.futures.ThreadPoolExecutor(max_workers=10) as pool:
        results = list(pool.map(lambda b: post(url + "/render", b, timeout=120)[1], bodies))
    for i, png in enumerate(results):
        assert png == sequential[i % 5]
