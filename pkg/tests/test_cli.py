import json
import os

import pytest

from qoe_lens.cli import main
from qoe_lens.synth import CorpusSpec, ConditionProfile
from qoe_lens.trace_ingest import ConditionKind


def _tiny_corpus_json(path, duration=30.0):
    profiles = []
    idx = 0
    for level in (250.0, 60.0, 15.0):
        profiles.append(ConditionProfile(
            kind=ConditionKind.BANDWIDTH_LIMIT, session_id=f"bw{idx}",
            seed=1000 + idx, duration=duration, limit_kbps=level))
        idx += 1
    for loss in (0.0, 10.0):
        profiles.append(ConditionProfile(
            kind=ConditionKind.PACKET_LOSS, session_id=f"lo{idx}",
            seed=1000 + idx, duration=duration, loss_pct=loss))
        idx += 1
    profiles.append(ConditionProfile(
        kind=ConditionKind.BANDWIDTH_DROP, session_id=f"dr{idx}",
        seed=1000 + idx, duration=duration, drop_to_kbps=50.0,
        drop_times_s=(duration / 3,)))
    spec = CorpusSpec(profiles=profiles)
    path.write_text(spec.to_json())
    return spec


def _tree(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            p = os.path.join(dirpath, f)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = fh.read()
    return out


class TestSynthCommand:
    def test_same_seed_byte_identical(self, tmp_path):
        corpus = tmp_path / "corpus.json"
        _tiny_corpus_json(corpus)
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        for out in (out_a, out_b):
            rc = main(["synth", "--corpus", str(corpus), "--out-dir", str(out)])
            assert rc == 0
        assert _tree(out_a) == _tree(out_b)

    def test_outputs_exist(self, tmp_path):
        corpus = tmp_path / "corpus.json"
        spec = _tiny_corpus_json(corpus)
        out = tmp_path / "out"
        assert main(["synth", "--corpus", str(corpus), "--out-dir", str(out)]) == 0
        assert (out / "sessions.csv").exists()
        assert (out / "labels.csv").exists()
        assert (out / "synth_manifest.json").exists()
        for p in spec.profiles:
            assert (out / "traces" / f"{p.session_id}.csv").exists()


class TestIngestClassifyFeaturize:
    def test_ingest_golden_pcap(self, tmp_path, golden_pcap):
        out = tmp_path / "trace.csv"
        rc = main(["ingest", "--pcap", str(golden_pcap), "--out", str(out)])
        assert rc == 0
        text = out.read_text().splitlines()
        assert len(text) == 4  # header + 3 UDP packets
        assert text[0].startswith("ts,src_ip")

    def test_classify_and_featurize_chain(self, tmp_path, golden_pcap):
        trace = tmp_path / "trace.csv"
        video = tmp_path / "video.csv"
        features = tmp_path / "features.csv"
        assert main(["ingest", "--pcap", str(golden_pcap), "--out", str(trace)]) == 0
        assert main(["classify", "--trace", str(trace), "--out", str(video)]) == 0
        assert main(["featurize", "--trace", str(video), "--session-id", "g",
                     "--duration", "2", "--out", str(features)]) == 0
        lines = features.read_text().splitlines()
        assert len(lines) == 3  # header + 2 slots

    def test_classify_optimize_writes_report(self, tmp_path):
        corpus = tmp_path / "corpus.json"
        _tiny_corpus_json(corpus, duration=10.0)
        out = tmp_path / "out"
        main(["synth", "--corpus", str(corpus), "--out-dir", str(out)])
        report = tmp_path / "threshold.json"
        video = tmp_path / "video.csv"
        rc = main(["classify", "--trace", str(out / "traces" / "bw0.csv"),
                   "--out", str(video), "--optimize", "--report", str(report)])
        assert rc == 0
        doc = json.loads(report.read_text())
        assert doc["accuracy"] >= 0.99


class TestLabelCommand:
    def test_label_from_logs(self, tmp_path):
        captures = tmp_path / "captures.csv"
        captures.write_text("ts,frame_id\n" + "".join(
            f"{0.1 * i + 0.05},{i // 2}\n" for i in range(60)))
        scores = tmp_path / "scores.csv"
        scores.write_text("ts,brisque,piqe\n0.5,45.0,30.0\n1.5,50.0,40.0\n")
        out = tmp_path / "labels.csv"
        rc = main(["label", "--captures", str(captures), "--scores", str(scores),
                   "--session-id", "s", "--duration", "3", "--out", str(out)])
        assert rc == 0
        lines = out.read_text().splitlines()
        assert len(lines) == 4


@pytest.fixture(scope="module")
def pipeline_out(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("pipe")
    corpus = tmp / "corpus.json"
    _tiny_corpus_json(corpus)
    out = tmp / "out"
    rc = main(["pipeline", "--corpus", str(corpus), "--out-dir", str(out),
               "--seed", "5", "--n-trees", "10", "--max-depth", "8", "--jobs", "2"])
    assert rc == 0
    return out


class TestPipelineCommand:
    def test_report_artifacts(self, pipeline_out):
        report_dir = pipeline_out / "report"
        assert (report_dir / "report.json").exists()
        assert (report_dir / "table3_mae.csv").exists()
        assert (report_dir / "table4_rating_acc.csv").exists()
        assert (report_dir / "fig6_tolerance.csv").exists()
        doc = json.loads((report_dir / "report.json").read_text())
        assert any(k.startswith("BandwidthLimit/fps/") for k in doc["mae_by_condition"])

    def test_models_written_for_all_targets_and_modes(self, pipeline_out):
        models = os.listdir(pipeline_out / "models")
        assert len(models) == 10
        assert "fps_udp.json" in models and "piqe_rating_rtp.json" in models

    def test_predictions_file(self, pipeline_out):
        lines = (pipeline_out / "predictions.csv").read_text().splitlines()
        assert lines[0] == "session_id,slot_end,mode,target,prediction"
        assert len(lines) > 100


class TestTrainPredictEvaluate:
    def test_train_rtp_on_udp_features_fails_cleanly(self, pipeline_out, tmp_path, capsys):
        rc = main(["train",
                   "--features", str(pipeline_out / "features_udp.csv"),
                   "--labels", str(pipeline_out / "labels.csv"),
                   "--sessions", str(pipeline_out / "sessions.csv"),
                   "--target", "fps", "--mode", "rtp",
                   "--out", str(tmp_path / "m.json")])
        assert rc == 1
        err = capsys.readouterr().err
        assert "SchemaMismatch" in err
        assert "rtp" in err

    def test_train_then_predict(self, pipeline_out, tmp_path):
        model_path = tmp_path / "fps_udp.json"
        rc = main(["train",
                   "--features", str(pipeline_out / "features_udp.csv"),
                   "--labels", str(pipeline_out / "labels.csv"),
                   "--sessions", str(pipeline_out / "sessions.csv"),
                   "--target", "fps", "--mode", "udp", "--n-trees", "10",
                   "--out", str(model_path)])
        assert rc == 0
        pred_path = tmp_path / "pred.csv"
        rc = main(["predict", "--model", str(model_path),
                   "--features", str(pipeline_out / "features_udp.csv"),
                   "--out", str(pred_path)])
        assert rc == 0
        assert len(pred_path.read_text().splitlines()) > 10

    def test_evaluate_from_files(self, pipeline_out, tmp_path):
        out_dir = tmp_path / "report2"
        rc = main(["evaluate",
                   "--predictions", str(pipeline_out / "predictions.csv"),
                   "--labels", str(pipeline_out / "labels.csv"),
                   "--sessions", str(pipeline_out / "sessions.csv"),
                   "--out-dir", str(out_dir)])
        assert rc == 0
        regenerated = json.loads((out_dir / "report.json").read_text())
        original = json.loads((pipeline_out / "report" / "report.json").read_text())
        assert regenerated["mae_by_condition"] == original["mae_by_condition"]
        assert regenerated["rating_accuracy"] == original["rating_accuracy"]


class TestConfigHandling:
    def test_config_file_defaults_applied(self, tmp_path, golden_pcap):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"threshold": 40}))
        trace = tmp_path / "t.csv"
        video = tmp_path / "v.csv"
        main(["ingest", "--pcap", str(golden_pcap), "--out", str(trace)])
        rc = main(["--config", str(config), "classify", "--trace", str(trace),
                   "--out", str(video)])
        assert rc == 0
        # threshold 40 keeps the 52- and 150-byte payloads as video
        assert len(video.read_text().splitlines()) == 3

    def test_unknown_config_key_rejected(self, tmp_path, capsys):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"bogus_key": 1}))
        rc = main(["--config", str(config), "synth", "--out-dir", str(tmp_path / "x")])
        assert rc == 2
        assert "bogus_key" in capsys.readouterr().err

    def test_flags_override_config(self, tmp_path, golden_pcap):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"threshold": 40}))
        trace = tmp_path / "t.csv"
        video = tmp_path / "v.csv"
        main(["ingest", "--pcap", str(golden_pcap), "--out", str(trace)])
        rc = main(["--config", str(config), "classify", "--trace", str(trace),
                   "--threshold", "275", "--out", str(video)])
        assert rc == 0
        # no golden payload exceeds 275 bytes, so only the header remains
        assert len(video.read_text().splitlines()) == 1
