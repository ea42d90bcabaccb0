import base64
import io
import json

import pytest
import torch
from fastapi.testclient import TestClient

from hairfast import imgio
from hairfast.config import GeneratorConfig
from hairfast.errors import CheckpointError
from hairfast.masks import SegMask
from hairfast.pipeline import HairFastRuntime, TransferRequest, transfer
from hairfast.registry import load_runtime, registry_hashes, save_runtime
from hairfast.service import create_app

CFG = GeneratorConfig(output_resolution=32, style_dim=32, channel_base=16,
                      channel_max=64, f_edit_block=2)


@pytest.fixture(scope="module")
def rt():
    runtime = HairFastRuntime.from_random(CFG, seed=0)
    runtime.generator.latent_avg()
    return runtime.eval_all()


@pytest.fixture(scope="module")
def registry_dir(rt, tmp_path_factory):
    d = tmp_path_factory.mktemp("registry")
    save_runtime(rt, d)
    return d


def png_upload(seed):
    img = torch.rand(3, 32, 32, generator=torch.Generator().manual_seed(seed)) * 2 - 1
    return ("img.png", io.BytesIO(imgio.png_bytes(img)), "image/png")


class TestRegistry:
    def test_roundtrip_preserves_outputs(self, rt, registry_dir):
        back = load_runtime(registry_dir)
        img = torch.rand(3, 32, 32, generator=torch.Generator().manual_seed(1)) * 2 - 1
        req = TransferRequest(face=img, shape=img, mode="both")
        out1, _ = transfer(rt, req)
        out2, _ = transfer(back, req)
        assert torch.equal(out1, out2)

    def test_hash_verified_on_load(self, rt, tmp_path):
        d = tmp_path / "reg"
        save_runtime(rt, d)
        bundle = d / "bundle.hfck"
        raw = bytearray(bundle.read_bytes())
        raw[-1] ^= 0xFF
        bundle.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="hash"):
            load_runtime(d)

    def test_fingerprint_mismatch_is_hard_error(self, rt, tmp_path):
        d = tmp_path / "reg"
        save_runtime(rt, d)
        manifest = json.loads((d / "manifest.json").read_text())
        other = GeneratorConfig(output_resolution=32, style_dim=16, channel_base=16,
                                channel_max=64, f_edit_block=2)
        manifest["generator_config"] = other.to_json()
        manifest["fingerprint"] = other.fingerprint()
        (d / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(CheckpointError, match="fingerprint"):
            load_runtime(d)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(CheckpointError, match="manifest"):
            load_runtime(tmp_path)

    def test_hashes_exposed(self, registry_dir):
        hashes = registry_hashes(registry_dir)
        assert set(hashes) == {"bundle.hfck"}
        assert len(hashes["bundle.hfck"]) == 64


class TestService:
    @pytest.fixture(scope="class")
    def client(self, rt):
        return TestClient(create_app(runtime=rt))

    def test_health(self, client, rt):
        body = client.get("/api/health").json()
        assert body["status"] == "ok"
        assert body["fingerprint"] == rt.cfg.fingerprint()

    def test_health_without_checkpoints(self):
        client = TestClient(create_app())
        assert client.get("/api/health").json()["status"] == "no_checkpoint"

    def test_transfer_roundtrip(self, client):
        resp = client.post("/api/transfer", files={"face": png_upload(0), "shape": png_upload(1)},
                           data={"mode": "both"})
        assert resp.status_code == 200
        body = resp.json()
        assert body["mode"] == "both"
        assert "request_id" in body
        png = base64.b64decode(body["image"])
        assert png[:8] == b"\x89PNG\r\n\x1a\n"
        assert "pose" in body["timings"] and "refine" in body["timings"]
        assert body["artifacts"]["i_final"] == "refine"

    def test_missing_part_is_400_naming_role(self, client):
        resp = client.post("/api/transfer", files={"face": png_upload(2)}, data={"mode": "color"})
        assert resp.status_code == 400
        assert resp.json()["missing"] == "color"

    def test_invalid_mode_is_400(self, client):
        resp = client.post("/api/transfer", files={"face": png_upload(3)}, data={"mode": "styles"})
        assert resp.status_code == 400

    def test_color_mode_timings_lack_pose_and_shape(self, client):
        resp = client.post("/api/transfer", files={"face": png_upload(4), "color": png_upload(5)},
                           data={"mode": "color"})
        body = resp.json()
        assert "pose" not in body["timings"] and "shape" not in body["timings"]

    def test_no_checkpoint_is_503(self):
        client = TestClient(create_app())
        resp = client.post("/api/transfer", files={"face": png_upload(6)}, data={"mode": "both"})
        assert resp.status_code == 503

    def test_degenerate_input_is_422(self, rt):
        app = create_app(runtime=rt)
        original = rt.segment
        rt.segment = lambda img: SegMask(torch.zeros(32, 32, dtype=torch.long))
        try:
            client = TestClient(app)
            resp = client.post("/api/transfer", files={"face": png_upload(7), "shape": png_upload(8)},
                               data={"mode": "both"})
            assert resp.status_code == 422
        finally:
            rt.segment = original

    def test_png_format_param(self, client):
        resp = client.post("/api/transfer?format=png",
                           files={"face": png_upload(9), "color": png_upload(10)},
                           data={"mode": "color"})
        assert resp.status_code == 200
        assert resp.headers["content-type"] == "image/png"
        assert resp.content[:8] == b"\x89PNG\r\n\x1a\n"

    def test_identical_requests_identical_bytes(self, client):
        import concurrent.futures

        def call():
            return client.post("/api/transfer?format=png",
                               files={"face": png_upload(11), "shape": png_upload(12)},
                               data={"mode": "both"}).content

        with concurrent.futures.ThreadPoolExecutor(max_workers=3) as pool:
            results = list(pool.map(lambda _: call(), range(3)))
        assert results[0] == results[1] == results[2]

    def test_oversized_body_rejected(self, rt):
        client = TestClient(create_app(runtime=rt, max_body=1024))
        big = ("big.png", io.BytesIO(b"\x89PNG\r\n\x1a\n" + b"0" * 4096), "image/png")
        resp = client.post("/api/transfer", files={"face": big, "shape": png_upload(13)},
                           data={"mode": "both"})
        assert resp.status_code == 413

    def test_non_image_part_is_400(self, client):
        bad = ("x.png", io.BytesIO(b"this is not a png"), "image/png")
        resp = client.post("/api/transfer", files={"face": bad, "shape": png_upload(14)},
                           data={"mode": "both"})
        assert resp.status_code == 400
