import logging
import os
from pathlib import Path

from flask import Flask, abort, jsonify, request, send_from_directory

from storyviz.config import OUTPUT_ROOT_ENV
from storyviz.database import RunDatabase

logger = logging.getLogger("storyviz.app")


def create_app(output_dir=None):
    """Read-only results browser over ``<output_dir>/runs.db`` and ``<output_dir>/grids``."""
    root = Path(output_dir or os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    root.mkdir(parents=True, exist_ok=True)

    app = Flask(__name__)
    app.config["OUTPUT_DIR"] = str(root)
    app.config["GRIDS_DIR"] = str(root / "grids")

    try:
        db = RunDatabase(root / "runs.db")
        logger.info("✅ run database opened at %s", root / "runs.db")
    except Exception as e:
        logger.error("❌ cannot open the run database: %s", e)
        raise
    app.config["DB"] = db

    @app.route('/')
    def home():
        try:
            return jsonify({
                "output_dir": app.config["OUTPUT_DIR"],
                "runs": len(db.get_runs(limit=-1)),
                "latest_reports": db.get_recent_reports(limit=3),
                "best_checkpoint": db.get_best_checkpoint(),
            })
        except Exception as e:
            return jsonify({"error": f"cannot read the run database: {e}"}), 500

    @app.route('/api/runs')
    def get_runs():
        try:
            limit = request.args.get('limit', 20, type=int)
            return jsonify(db.get_runs(limit))
        except Exception as e:
            return jsonify({"error": f"cannot list runs: {e}"}), 500

    @app.route('/api/runs/<int:run_id>')
    def get_run(run_id):
        try:
            run = db.get_run(run_id)
            if run is None:
                return jsonify({"error": f"run {run_id} not found"}), 404
            run["stats"] = db.get_run_stats(run_id)
            run["best_checkpoint"] = db.get_best_checkpoint(run_id)
            return jsonify(run)
        except Exception as e:
            return jsonify({"error": f"cannot read run {run_id}: {e}"}), 500

    @app.route('/api/runs/<int:run_id>/losses')
    def get_run_losses(run_id):
        try:
            every = request.args.get('every', 1, type=int)
            return jsonify(db.get_loss_progress(run_id, every))
        except Exception as e:
            return jsonify({"error": f"cannot read losses: {e}"}), 500

    @app.route('/api/reports')
    def get_reports():
        try:
            limit = request.args.get('limit', 10, type=int)
            return jsonify(db.get_recent_reports(limit))
        except Exception as e:
            return jsonify({"error": f"cannot list reports: {e}"}), 500

    @app.route('/api/reports/<int:report_id>')
    def get_report(report_id):
        try:
            report = db.get_report(report_id)
            if report is None:
                return jsonify({"error": f"report {report_id} not found"}), 404
            return jsonify(report)
        except Exception as e:
            return jsonify({"error": f"cannot read report {report_id}: {e}"}), 500

    @app.route('/api/grids')
    def list_grids():
        grids = Path(app.config["GRIDS_DIR"])
        if not grids.exists():
            return jsonify([])
        return jsonify(sorted(p.name for p in grids.glob("*.png")))

    @app.route('/grids/<path:filename>')
    def get_grid(filename):
        if not filename.endswith(".png"):
            abort(404)
        return send_from_directory(app.config["GRIDS_DIR"], filename)

    return app


if __name__ == '__main__':
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    logger.info("🚀 starting the results browser...")
    create_app().run(debug=True)
