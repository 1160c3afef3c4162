import pytest

from app import create_app
from storyviz.evaluation.report import MetricReport


@pytest.fixture
def app(tmp_path):
    app = create_app(tmp_path)
    app.config["TESTING"] = True
    return app


@pytest.fixture
def client(app):
    return app.test_client()


def _record(step):
    return {"step": step, "epoch": 0, "kl": 0.1, "g_adv": 0.7, "dual": 3.0, "d_img": 0.69,
            "d_story": 0.69, "char": 0.5, "lr": 2e-4, "lr_d": 1e-4}


def test_home_on_an_empty_database(client):
    response = client.get("/")
    assert response.status_code == 200
    body = response.get_json()
    assert body["runs"] == 0
    assert body["latest_reports"] == []
    assert body["best_checkpoint"] is None


def test_runs_and_losses(app, client, cfg):
    db = app.config["DB"]
    run_id = db.create_run("tiny", cfg)
    for step in range(1, 5):
        db.add_loss_record(run_id, _record(step))
    db.add_checkpoint(run_id, "checkpoints/epoch_001.pt", 1, 4, 33.0)

    runs = client.get("/api/runs").get_json()
    assert [r["name"] for r in runs] == ["tiny"]

    run = client.get(f"/api/runs/{run_id}").get_json()
    assert run["stats"]["steps_logged"] == 4
    assert run["best_checkpoint"]["path"] == "checkpoints/epoch_001.pt"

    losses = client.get(f"/api/runs/{run_id}/losses?every=2").get_json()
    assert [r["step"] for r in losses] == [2, 4]
    assert client.get("/").get_json()["runs"] == 1


def test_reports(app, client):
    report = MetricReport(
        char_f1=40.0, char_exact_match=20.0, per_character_f1={"ruby": 50.0}, bleu2=12.0, bleu3=6.0,
        disc_top1=30.0, disc_top2=50.0, r_precision_mean=4.0, r_precision_std=0.5,
        metadata={"checkpoint": "best.pt", "split": "test", "seed": 0},
    )
    report_id = app.config["DB"].save_metric_report(report)
    assert client.get("/api/reports").get_json()[0]["id"] == report_id
    stored = client.get(f"/api/reports/{report_id}").get_json()
    assert stored["disc_top2"] == 50.0


def test_unknown_ids_are_404(client):
    assert client.get("/api/runs/42").status_code == 404
    assert "not found" in client.get("/api/runs/42").get_json()["error"]
    assert client.get("/api/reports/7").status_code == 404


def test_grids(tmp_path, client):
    assert client.get("/api/grids").get_json() == []
    grids = tmp_path / "grids"
    grids.mkdir()
    (grids / "b.png").write_bytes(b"\x89PNG\r\n\x1a\n")
    (grids / "a.png").write_bytes(b"\x89PNG\r\n\x1a\n")
    (grids / "notes.txt").write_text("x")
    assert client.get("/api/grids").get_json() == ["a.png", "b.png"]
    assert client.get("/grids/a.png").status_code == 200
    assert client.get("/grids/notes.txt").status_code == 404
