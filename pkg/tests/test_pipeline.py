import json
import shutil

import numpy as np
import pytest

from ihaudit import config as C
from ihaudit import pipeline as P
from ihaudit.errors import FormatError, InsufficientReferences, IoError, MissingArtifact


def tiny_raw(**over):
    raw = {
        "dataset": {"source": "synthetic", "n": 160, "feature_dim": 8, "num_classes": 3, "seed": 2},
        "model": {"architecture": "mlp", "hidden": [5]},
        "sgd": {"learning_rate": 0.05, "momentum": 0.9, "weight_decay": 5e-4, "batch_size": 16, "epochs": 8},
        "num_models": 4,
        "attacks": [
            {"name": "loss"},
            {"name": "iha"},
            {"name": "iha", "terms": "i1"},
            {"name": "iha", "terms": "i2"},
            {"name": "iha", "terms": "i1,i2"},
            {"name": "iha", "l0_fraction": 0.5},
            {"name": "iha", "id": "iha-cg", "hessian": "hvp"},
            {"name": "sif"},
            {"name": "lattack", "references": 2, "max_records": 6},
        ],
        "audit": {"targets": [0, 1], "fprs": [0.1], "agreement_fpr": 0.1},
    }
    raw.update(over)
    return raw


def make_cfg(tmp_path, **over):
    return C.from_dict(tiny_raw(output_dir=str(tmp_path / "out"), **over), tmp_path, env={})


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("game")
    cfg = make_cfg(root)
    P.cmd_train(cfg)
    P.cmd_hessian(cfg)
    return cfg


def snapshot(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestConfig:
    def test_default(self):
        cfg = C.load(None, env={})
        assert cfg.num_models == 32 and cfg.gamma == 0.5
        assert [a.id for a in cfg.attacks] == ["loss", "iha", "iha[loss+i1+i2]", "sif", "lira"]
        assert len(cfg.hash) == 64

    def test_hash_ignores_location_and_threads(self, tmp_path):
        a = C.from_dict(tiny_raw(output_dir="x", threads=1), tmp_path, env={})
        b = C.from_dict(tiny_raw(output_dir="y", threads=3), tmp_path, env={})
        c = C.from_dict(tiny_raw(num_models=5), tmp_path, env={})
        assert a.hash == b.hash != c.hash

    def test_env_overrides(self, tmp_path):
        cfg = C.from_dict(tiny_raw(), tmp_path, env={C.ENV_OUTPUT_DIR: str(tmp_path / "o"), C.ENV_THREADS: "3"})
        assert cfg.output_dir == tmp_path / "o" and cfg.threads == 3

    @pytest.mark.parametrize(
        "over",
        [
            {"version": 2},
            {"bogus": 1},
            {"gamma": 1.0},
            {"sgd": {"momentum": 1.5}},
            {"attacks": [{"name": "loss"}, {"name": "loss"}]},
            {"attacks": [{"name": "nope"}]},
            {"attacks": [{"name": "loss", "terms": "i1"}]},
            {"num_models": 1, "attacks": [{"name": "lira"}], "audit": {"targets": [0]}},
            {"audit": {"targets": [9]}},
        ],
    )
    def test_invalid(self, tmp_path, over):
        with pytest.raises(FormatError):
            C.from_dict(tiny_raw(**over), tmp_path, env={})

    def test_default_attack_ids(self, tmp_path):
        cfg = make_cfg(tmp_path)
        assert [a.id for a in cfg.attacks] == [
            "loss", "iha", "iha[i1]", "iha[i2]", "iha[i1+i2]", "iha[l0=0.5]", "iha-cg", "sif", "lattack",
        ]

    def test_file_loading(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps(tiny_raw(output_dir="runs")))
        cfg = C.load(p, env={})
        assert cfg.output_dir == tmp_path / "runs"
        p.write_text("{")
        with pytest.raises(FormatError):
            C.load(p, env={})
        with pytest.raises(MissingArtifact):
            C.load(tmp_path / "absent.json")

    def test_relative_dataset_paths(self, tmp_path):
        (tmp_path / "d.csv").write_text("a,b,label\n1,2,0\n3,4,1\n")
        cfg = C.from_dict(tiny_raw(dataset={"source": "csv", "path": "d.csv"}), tmp_path, env={})
        assert len(cfg.dataset) == 2
        bad = C.from_dict(tiny_raw(dataset={"source": "csv", "path": "gone.csv"}), tmp_path, env={})
        with pytest.raises(MissingArtifact, match="gone.csv"):
            bad.dataset


class TestTrain:
    def test_files(self, trained):
        root = trained.output_dir
        assert len(list((root / "models").glob("model_*.params"))) == 4
        assert len(list((root / "models").glob("mask_*.txt"))) == 4
        man = json.loads((root / "manifest.json").read_text())
        assert man["config_hash"] == trained.hash
        assert {"train_loss", "test_loss", "train_accuracy", "test_accuracy"} <= set(man["models"][0]["metrics"])
        assert len({m["sgd_seed"] for m in man["models"]}) == 4

    def test_rerun_is_noop(self, tmp_path):
        cfg = make_cfg(tmp_path, num_models=2, audit={"targets": [0]})
        P.cmd_train(cfg)
        before = snapshot(cfg.output_dir)
        mtime = (cfg.output_dir / "manifest.json").stat().st_mtime_ns
        assert P.cmd_train(cfg)["retrained"] == []
        assert snapshot(cfg.output_dir) == before
        assert (cfg.output_dir / "manifest.json").stat().st_mtime_ns == mtime

    def test_corrupt_parameter_file_is_retrained(self, tmp_path):
        cfg = make_cfg(tmp_path, num_models=3, audit={"targets": [0]})
        P.cmd_train(cfg)
        before = snapshot(cfg.output_dir)
        bad = P.Layout(cfg.output_dir).params(1)
        bad.write_bytes(bad.read_bytes()[:-3])
        assert P.cmd_train(cfg)["retrained"] == [1]
        assert snapshot(cfg.output_dir) == before

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        cfg = C.from_dict(tiny_raw(num_models=2, audit={"targets": [0]}, output_dir=str(blocker / "out")), tmp_path, env={})
        with pytest.raises(IoError):
            P.cmd_train(cfg)

    def test_threads_do_not_change_results(self, tmp_path):
        a = make_cfg(tmp_path / "a", num_models=3, audit={"targets": [0]})
        b = C.from_dict(tiny_raw(num_models=3, audit={"targets": [0]}, output_dir=str(tmp_path / "b"), threads=3), tmp_path, env={})
        P.cmd_train(a)
        P.cmd_train(b)
        assert snapshot(a.output_dir) == snapshot(b.output_dir)


class TestAudit:
    def test_loss_rows(self, trained):
        path = P.cmd_audit(trained, "loss", 0)
        table, h = P.read_score_table(path)
        _, mask = P.load_model(trained, 0)
        members = int(mask.bits.sum())
        assert h == trained.hash
        assert len(table) == members + min(members, len(mask.bits) - members)
        assert table.is_member.sum() == members
        assert path.read_text().startswith(f"# config_hash={trained.hash}\nrecord_index,attack,score,is_member\n")

    def test_partial_l0_sidecar(self, trained):
        P.cmd_audit(trained, "iha[l0=0.5]", 1)
        side = json.loads(P.Layout(trained.output_dir).sidecar("iha[l0=0.5]", 1).read_text())
        table, _ = P.read_score_table(P.Layout(trained.output_dir).scores("iha[l0=0.5]", 1))
        assert side["l0_fraction"] == 0.5
        assert set(side["l0_subset_seeds"]) == {str(r) for r in table.record_index}
        assert side["conditioning"] == {"mode": "damped", "epsilon": 0.2}
        assert side["config_hash"] == trained.hash

    def test_persisted_hessian_is_used(self, trained):
        P.cmd_audit(trained, "iha", 0)
        side = json.loads(P.Layout(trained.output_dir).sidecar("iha", 0).read_text())
        assert side["hessian"] == "persisted"

    def test_exact_and_cg_scores_agree(self, trained):
        exact, _ = P.score_target(trained, "iha", 0)
        cg, side = P.score_target(trained, "iha-cg", 0)
        assert side["hessian"] == "cg"
        np.testing.assert_allclose(cg.score, exact.score, rtol=1e-6, atol=1e-6 * np.abs(exact.score).max())

    def test_lattack(self, trained):
        table, side = P.score_target(trained, "lattack", 0)
        assert len(table) == 6 and table.is_member.sum() == 3
        assert set(np.unique(table.score)) <= {0.0, 0.5, 1.0}
        again, _ = P.score_target(trained, "lattack", 0)
        np.testing.assert_array_equal(again.score, table.score)

    def test_lira_needs_references(self, tmp_path):
        cfg = make_cfg(tmp_path, num_models=3, attacks=[{"name": "lira"}], audit={"targets": [0]})
        P.cmd_train(cfg)
        with pytest.raises(InsufficientReferences):
            P.cmd_audit(cfg, "lira", 0)

    def test_missing_model(self, tmp_path):
        cfg = make_cfg(tmp_path, num_models=2, audit={"targets": [0]})
        P.cmd_train(cfg)
        path = P.Layout(cfg.output_dir).params(1)
        path.unlink()
        with pytest.raises(MissingArtifact) as info:
            P.cmd_audit(cfg, "loss", 1)
        assert info.value.path == str(path)

    def test_no_manifest(self, tmp_path):
        cfg = make_cfg(tmp_path)
        with pytest.raises(MissingArtifact, match="manifest.json"):
            P.cmd_audit(cfg, "loss", 0)


@pytest.fixture(scope="module")
def audited(trained):
    for a in ("loss", "iha", "iha[i1]", "iha[i2]", "iha[i1+i2]", "sif"):
        for k in trained.targets:
            P.cmd_audit(trained, a, k)
    return trained


class TestEvaluate:
    def test_perfect_table(self, tmp_path):
        p = tmp_path / "t" / "target_0000.csv"
        p.parent.mkdir()
        p.write_text("# config_hash=abc\nrecord_index,attack,score,is_member\n0,x,3,1\n1,x,4,1\n2,x,1,0\n3,x,2,0\n")
        m = P.cmd_evaluate(None, [p], tmp_path / "m")
        assert m["attacks"]["x"]["auc_mean"] == 1.0
        assert m["attacks"]["x"]["auc_std"] is None

    def test_metrics(self, audited):
        m = P.cmd_evaluate(audited)
        for a in ("iha[i1]", "iha[i2]", "iha[i1+i2]", "iha"):
            assert m["attacks"][a]["num_models"] == 2
            assert m["attacks"][a]["auc_std"] is not None
        assert m["attacks"]["iha[i1+i2]"]["terms"] == "i1+i2"
        assert m["attacks"]["iha"]["terms"] == "loss+i1+i2+i3+i4"
        assert m["agreement"]["target_models"] == ["0", "1"]

    def test_outputs_embed_hash_and_are_reproducible(self, audited):
        P.cmd_evaluate(audited)
        d = P.Layout(audited.output_dir).metrics_dir
        first = snapshot(d)
        P.cmd_evaluate(audited)
        assert snapshot(d) == first
        for name, body in first.items():
            assert audited.hash.encode() in body, name

    def test_agreement_with_ground_truth(self, audited):
        m = P.cmd_evaluate(audited)
        rows = (P.Layout(audited.output_dir).metrics_dir / "agreement.csv").read_text().splitlines()[1:]
        header = rows[0].split(",")
        mat = {r.split(",")[0]: [float(v) for v in r.split(",")[1:]] for r in rows[1:]}
        for a in ("loss", "iha"):
            # row a, column GT is the non-member agreement
            assert mat[a][header.index("GT") - 1] == pytest.approx(1 - m["agreement"]["realized_fpr"][a])

    def test_mismatched_hashes(self, audited, tmp_path):
        src = P.Layout(audited.output_dir).scores("loss", 0)
        other = tmp_path / "target_0009.csv"
        other.write_text(src.read_text().replace(audited.hash, "0" * 64))
        with pytest.raises(FormatError):
            P.cmd_evaluate(None, [src, other], tmp_path / "m")

    @pytest.mark.parametrize(
        "body",
        [
            "record_index,attack,score,is_member\n0,x,1,1\n",
            "# config_hash=a\nidx,attack,score,is_member\n0,x,1,1\n",
            "# config_hash=a\nrecord_index,attack,score,is_member\n0,x,1,2\n",
            "# config_hash=a\nrecord_index,attack,score,is_member\n0,x,one,1\n",
            "# config_hash=a\nrecord_index,attack,score,is_member\n",
        ],
    )
    def test_schema_errors(self, tmp_path, body):
        p = tmp_path / "target_0000.csv"
        p.write_text(body)
        with pytest.raises(FormatError):
            P.read_score_table(p)


def test_run_all_is_deterministic(tmp_path):
    raw = tiny_raw(
        num_models=16,
        attacks=[{"name": "loss"}, {"name": "iha"}, {"name": "lira", "mode": "offline"}],
        audit={"targets": [0, 1], "fprs": [0.1], "agreement_fpr": 0.1},
    )
    outs = []
    for name in ("a", "b"):
        cfg = C.from_dict({**raw, "output_dir": str(tmp_path / name)}, tmp_path, env={})
        P.run_all(cfg)
        outs.append(snapshot(cfg.output_dir / "metrics"))
    assert outs[0] == outs[1]
    shutil.rmtree(tmp_path / "a")
