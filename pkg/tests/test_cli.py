"""End-to-end command-line pipelines on small synthetic inputs."""

import hashlib
import json
import os

import numpy as np
import pytest

from sonotensor.cli import main
from sonotensor.volume import (
    RigidTransform,
    ScalarVolume,
    read_tensor,
    read_volume,
    save_views_manifest,
    write_volume,
)


def write_spec(path, dims=(4, 4, 4), n_views=6, sigma=0.0, seed=None, region=True):
    doc = {
        "dims": list(dims),
        "background": {"eigenvalues": [0.5, 0.7, 0.9]},
        "noise_sigma": sigma,
        "n_views": n_views,
    }
    if region:
        doc["regions"] = [{
            "shape": "box",
            "min_voxel": [1, 1, 1],
            "max_voxel": [3, 3, 3],
            "tensor": {"eigenvalues": [1.5, 1.0, 0.8], "rotation_deg": [0, 30, 0]},
        }]
    if seed is not None:
        doc["seed"] = seed
    path.write_text(json.dumps(doc))
    return path


def file_hashes(root, skip=("run_manifest.json",)):
    out = {}
    for name in sorted(os.listdir(root)):
        if name in skip:
            continue
        with open(os.path.join(root, name), "rb") as fh:
            out[name] = hashlib.sha256(fh.read()).hexdigest()
    return out


class TestSynthCommand:
    def test_writes_views_truth_and_manifests(self, tmp_path):
        spec = write_spec(tmp_path / "spec.json", n_views=7)
        out = tmp_path / "out"
        assert main(["synth", str(spec), str(out)]) == 0
        names = sorted(os.listdir(out))
        assert names.count("truth.cvol") == 1
        assert len([n for n in names if n.startswith("view_")]) == 7
        assert "views.json" in names and "run_manifest.json" in names
        manifest = json.loads((out / "run_manifest.json").read_text())
        assert manifest["tool_version"]
        assert "wall_time_s" in manifest

    def test_same_seed_reproduces_hashes(self, tmp_path):
        spec = write_spec(tmp_path / "spec.json", sigma=0.05, seed=77)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert main(["synth", str(spec), str(out1)]) == 0
        assert main(["synth", str(spec), str(out2)]) == 0
        assert file_hashes(out1) == file_hashes(out2)

    def test_noise_without_seed_fails(self, tmp_path, capsys):
        spec = write_spec(tmp_path / "spec.json", sigma=0.05, seed=None)
        out = tmp_path / "out"
        assert main(["synth", str(spec), str(out)]) == 1
        assert "seed is mandatory" in capsys.readouterr().err

    def test_failure_leaves_no_partial_outputs(self, tmp_path):
        spec = write_spec(tmp_path / "spec.json")
        doc = json.loads(spec.read_text())
        doc["n_views"] = 5  # fewer than the 6 directions needed to span
        spec.write_text(json.dumps(doc))
        out = tmp_path / "out"
        assert main(["synth", str(spec), str(out)]) == 1
        assert not os.path.exists(out) or os.listdir(out) == []


class TestCompoundCommand:
    def test_logeuclid_then_project(self, tmp_path):
        spec = write_spec(tmp_path / "spec.json")
        data = tmp_path / "data"
        main(["synth", str(spec), str(data)])
        fit = tmp_path / "fit"
        assert main(["compound", str(data / "views.json"), str(fit),
                     "--lambda", "10", "--delta", "0.01"]) == 0
        report = json.loads((fit / "solve_report.json").read_text())
        assert report["method"] == "logeuclid"
        assert report["final_cost"] <= report["initial_cost"]
        assert "wall_time_s" not in report

        proj = tmp_path / "proj"
        assert main(["project", str(fit / "tensor.cvol"), str(proj),
                     "--direction", "0,0,1", "--slice-pgm", "mid.pgm"]) == 0
        vol = read_volume(proj / "projection.cvol")
        assert vol.values.min() > 0
        assert (proj / "mid.pgm").read_bytes().startswith(b"P5\n4 4\n255\n")
        manifest = json.loads((proj / "run_manifest.json").read_text())
        lo, hi = manifest["pgm_window"]
        assert lo <= hi and manifest["pgm_slice_z"] == 2

    def test_direction_is_auto_normalized(self, tmp_path):
        spec = write_spec(tmp_path / "spec.json", region=False)
        data = tmp_path / "data"
        main(["synth", str(spec), str(data)])
        fit = tmp_path / "fit"
        main(["compound", str(data / "views.json"), str(fit), "--lambda", "0"])
        p1, p2 = tmp_path / "p1", tmp_path / "p2"
        main(["project", str(fit / "tensor.cvol"), str(p1), "--direction", "0,0,1"])
        main(["project", str(fit / "tensor.cvol"), str(p2), "--direction", "0,0,2"])
        a = read_volume(p1 / "projection.cvol")
        b = read_volume(p2 / "projection.cvol")
        assert np.array_equal(a.values, b.values)

    def test_zero_direction_rejected(self, tmp_path, capsys):
        spec = write_spec(tmp_path / "spec.json", region=False)
        data = tmp_path / "data"
        main(["synth", str(spec), str(data)])
        fit = tmp_path / "fit"
        main(["compound", str(data / "views.json"), str(fit), "--lambda", "0"])
        assert main(["project", str(fit / "tensor.cvol"), str(tmp_path / "p"),
                     "--direction", "0,0,0"]) == 1
        assert "zero" in capsys.readouterr().err

    def test_baseline_method_reports_definiteness(self, tmp_path):
        spec = write_spec(tmp_path / "spec.json")
        data = tmp_path / "data"
        main(["synth", str(spec), str(data)])
        fit = tmp_path / "fit"
        assert main(["compound", str(data / "views.json"), str(fit),
                     "--method", "baseline"]) == 0
        report = json.loads((fit / "solve_report.json").read_text())
        assert report["method"] == "baseline"
        assert "n_indefinite" in report
        assert read_tensor(fit / "tensor.cvol").params.shape == (4, 4, 4, 6)

    def test_config_file_with_flag_precedence(self, tmp_path):
        spec = write_spec(tmp_path / "spec.json", region=False)
        data = tmp_path / "data"
        main(["synth", str(spec), str(data)])
        cfg = tmp_path / "solve.json"
        cfg.write_text(json.dumps({"lam": 5.0, "max_iterations": 3}))
        fit = tmp_path / "fit"
        assert main(["compound", str(data / "views.json"), str(fit),
                     "--config", str(cfg), "--lambda", "0"]) == 0
        manifest = json.loads((fit / "run_manifest.json").read_text())
        assert manifest["config"]["solve"]["lam"] == 0.0  # flag wins
        assert manifest["config"]["solve"]["max_iterations"] == 3

    def test_missing_volume_fails_without_partial_outputs(self, tmp_path, capsys):
        save_views_manifest([{
            "volume": "missing.cvol",
            "direction": [0, 0, 1],
            "transform": RigidTransform.identity().to_dict(),
        }], tmp_path / "views.json")
        out = tmp_path / "fit"
        assert main(["compound", str(tmp_path / "views.json"), str(out)]) == 1
        assert not os.path.exists(out) or os.listdir(out) == []


class TestLooCommand:
    def test_default_lambda_list_is_the_standard_sweep(self):
        from sonotensor.cli import _build_parser
        args = _build_parser().parse_args(["loo", "m.json", "out"])
        assert args.lambdas == "0,1,10,100"

    def test_sweep_outputs_and_row_count(self, tmp_path):
        spec = write_spec(tmp_path / "spec.json", dims=(3, 3, 3), n_views=6,
                          sigma=0.02, seed=5)
        data = tmp_path / "data"
        main(["synth", str(spec), str(data)])
        out = tmp_path / "loo"
        assert main(["loo", str(data / "views.json"), str(out),
                     "--lambdas", "0,1", "--max-iterations", "8"]) == 0
        table = json.loads((out / "loo.json").read_text())
        assert table["lambdas"] == [0.0, 1.0]
        methods = [r["method"] for r in table["results"]]
        assert methods == ["baseline", "logeuclid", "logeuclid"]
        csv_lines = (out / "loo.csv").read_text().splitlines()
        assert len(csv_lines) == 1 + 3 * 6  # header + methods*lambdas x rounds

    def test_rerun_is_byte_identical(self, tmp_path):
        spec = write_spec(tmp_path / "spec.json", dims=(3, 3, 3), n_views=6,
                          sigma=0.02, seed=5)
        data = tmp_path / "data"
        main(["synth", str(spec), str(data)])
        out1, out2 = tmp_path / "l1", tmp_path / "l2"
        for out in (out1, out2):
            assert main(["loo", str(data / "views.json"), str(out),
                         "--lambdas", "0", "--no-baseline",
                         "--max-iterations", "5"]) == 0
        assert (out1 / "loo.csv").read_bytes() == (out2 / "loo.csv").read_bytes()
        assert (out1 / "loo.json").read_bytes() == (out2 / "loo.json").read_bytes()


class TestAlignCommand:
    def test_identity_chain(self, tmp_path):
        pairwise = [RigidTransform.identity().to_dict() for _ in range(8)]
        (tmp_path / "pairwise.json").write_text(json.dumps(pairwise))
        out = tmp_path / "chain.json"
        assert main(["align", str(tmp_path / "pairwise.json"), str(out)]) == 0
        doc = json.loads(out.read_text())
        assert doc["reference"] == 4  # middle of nine
        for T in doc["transforms"]:
            R = np.array(T["rotation"]).reshape(3, 3)
            np.testing.assert_allclose(R, np.eye(3), atol=1e-15)
            np.testing.assert_allclose(T["translation"], 0.0, atol=1e-15)

    def test_chain_roundtrips_against_inverse(self, tmp_path):
        rng = np.random.default_rng(90)
        pairwise = []
        for _ in range(4):
            Q, R = np.linalg.qr(rng.normal(size=(3, 3)))
            Q = Q * np.sign(np.diag(R))
            if np.linalg.det(Q) < 0:
                Q[:, 0] = -Q[:, 0]
            pairwise.append(RigidTransform(Q, rng.normal(size=3)).to_dict())
        (tmp_path / "pairwise.json").write_text(json.dumps(pairwise))
        out = tmp_path / "chain.json"
        assert main(["align", str(tmp_path / "pairwise.json"), str(out), "--ref", "0"]) == 0
        doc = json.loads(out.read_text())
        chain = [RigidTransform.from_dict(d) for d in doc["transforms"]]
        # chain[4] maps frame 4 to the reference frame 0; walking the pairwise
        # maps from 0 up to 4 first must therefore round-trip to the identity
        pw = [RigidTransform.from_dict(d) for d in pairwise]
        fwd = RigidTransform.identity()
        for k in range(4):
            fwd = pw[k].compose(fwd)
        assert chain[4].compose(fwd).is_identity(1e-10)

    def test_count_mismatch_rejected(self, tmp_path, capsys):
        pairwise = [RigidTransform.identity().to_dict() for _ in range(2)]
        (tmp_path / "pairwise.json").write_text(json.dumps(pairwise))
        vol = ScalarVolume(np.ones((2, 2, 2)))
        write_volume(vol, tmp_path / "v.cvol")
        save_views_manifest([{
            "volume": "v.cvol", "direction": [0, 0, 1],
            "transform": RigidTransform.identity().to_dict(),
        }], tmp_path / "views.json")
        assert main(["align", str(tmp_path / "pairwise.json"), str(tmp_path / "c.json"),
                     "--apply", str(tmp_path / "views.json")]) == 1
        assert "chain covers 3" in capsys.readouterr().err


class TestResampleToReference:
    def test_perturbed_views_land_back_on_the_reference_grid(self):
        from sonotensor.cli import _resample_to_reference
        from sonotensor.synth import PhantomSpec, Region, RegionTensor, make_phantom, \
            render_views, spanning_directions

        spec = PhantomSpec(dims=(8, 8, 8),
                           background=RegionTensor((0.5, 0.7, 0.9)),
                           regions=(Region("box", RegionTensor((1.2, 1.0, 0.8)),
                                           min_voxel=(2, 2, 2), max_voxel=(6, 6, 6)),))
        truth = make_phantom(spec)
        dirs = spanning_directions(6)
        shifts = [RigidTransform(np.eye(3), np.array([float(k % 3 - 1), 0.0, 0.0]))
                  for k in range(6)]
        aligned = render_views(truth, dirs, 0.0)
        perturbed = render_views(truth, dirs, 0.0, transforms=shifts)
        fixed = _resample_to_reference(perturbed)
        for (va, _), (vf, gf) in zip(aligned, fixed):
            assert gf.transform.is_identity()
            joint = va.valid_mask() & vf.valid_mask()
            assert joint.sum() > 0
            np.testing.assert_allclose(vf.values[joint], va.values[joint], atol=1e-10)


class TestAlignRefined:
    def test_refined_transform_overrides_chain(self, tmp_path):
        pairwise = [RigidTransform.identity().to_dict() for _ in range(2)]
        (tmp_path / "pairwise.json").write_text(json.dumps(pairwise))
        refined = {"0": RigidTransform(np.eye(3), np.array([0.0, 0.0, 4.5])).to_dict()}
        (tmp_path / "refined.json").write_text(json.dumps(refined))
        out = tmp_path / "chain.json"
        assert main(["align", str(tmp_path / "pairwise.json"), str(out),
                     "--refined", str(tmp_path / "refined.json")]) == 0
        doc = json.loads(out.read_text())
        np.testing.assert_allclose(doc["transforms"][0]["translation"], [0, 0, 4.5])
        np.testing.assert_allclose(doc["transforms"][1]["translation"], [0, 0, 0])

    def test_refined_must_be_rigid(self, tmp_path, capsys):
        pairwise = [RigidTransform.identity().to_dict()]
        (tmp_path / "pairwise.json").write_text(json.dumps(pairwise))
        bad = {"0": {"rotation": [2, 0, 0, 0, 1, 0, 0, 0, 1], "translation": [0, 0, 0]}}
        (tmp_path / "refined.json").write_text(json.dumps(bad))
        assert main(["align", str(tmp_path / "pairwise.json"), str(tmp_path / "c.json"),
                     "--refined", str(tmp_path / "refined.json")]) == 1
        assert "orthonormal" in capsys.readouterr().err


class TestPsnrCommand:
    def test_prints_value(self, tmp_path, capsys):
        a = ScalarVolume(np.full((3, 3, 3), 0.5))
        b = ScalarVolume(np.full((3, 3, 3), 0.6))
        write_volume(a, tmp_path / "a.cvol")
        write_volume(b, tmp_path / "b.cvol")
        assert main(["psnr", str(tmp_path / "a.cvol"), str(tmp_path / "b.cvol"),
                     "--peak", "1.0"]) == 0
        out = capsys.readouterr().out.strip()
        assert abs(float(out) - 20.0) < 1e-5

    def test_identical_prints_inf(self, tmp_path, capsys):
        a = ScalarVolume(np.full((2, 2, 2), 0.5))
        write_volume(a, tmp_path / "a.cvol")
        assert main(["psnr", str(tmp_path / "a.cvol"), str(tmp_path / "a.cvol")]) == 0
        assert capsys.readouterr().out.strip() == "inf"
