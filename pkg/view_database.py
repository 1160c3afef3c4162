# File: view_database.py
# Console viewer for the storyviz run database

import csv
import os
import sys
from datetime import datetime
from pathlib import Path

from storyviz.config import OUTPUT_ROOT_ENV
from storyviz.database import RunDatabase


def open_db(output_dir=None):
    """Open ``<output_dir>/runs.db``; None if there is no database yet."""
    path = Path(output_dir or os.environ.get(OUTPUT_ROOT_ENV, "runs")) / "runs.db"
    if not path.exists():
        print(f"❌ No run database at {path}")
        return None
    return RunDatabase(path)


def _fmt(value, spec=".2f"):
    return "-" if value is None else format(value, spec)


def show_runs(db, limit=20):
    """Display recent training runs"""
    runs = db.get_runs(limit)

    print("\n" + "="*100)
    print("🏃 Training Runs:")
    print("="*100)

    if not runs:
        print("📝 No runs yet")
        return

    print(f"{'ID':<4} {'Name':<15} {'Preset':<7} {'Seed':<6} {'Status':<9} {'Steps':<7} {'Best F1':<8} {'Started':<20}")
    print("-"*100)
    for run in runs:
        status = {"running": "🟡 run", "finished": "🟢 done", "failed": "🔴 fail"}.get(run["status"], run["status"])
        print(f"{run['id']:<4} {run['name']:<15} {run['preset']:<7} {run['seed']:<6} {status:<9} "
              f"{run['last_step']:<7} {_fmt(run['best_val_char_f1']):<8} {str(run['started_at'])[:16]:<20}")


def show_run_losses(db, run_id, every=1):
    """Display the loss curve of one run"""
    run = db.get_run(run_id)
    if run is None:
        print(f"❌ Run {run_id} not found")
        return

    records = db.get_loss_progress(run_id, every)
    print("\n" + "="*90)
    print(f"📉 Losses for run {run_id} ({run['name']}):")
    print("="*90)

    if not records:
        print("📝 No loss records yet")
        return

    print(f"{'Step':<7} {'Epoch':<6} {'KL':<8} {'G adv':<8} {'Dual':<8} {'D img':<8} {'D story':<8} {'Char':<8} {'LR':<9}")
    print("-"*90)
    for r in records:
        print(f"{r['step']:<7} {r['epoch']:<6} {r['kl']:<8.4f} {r['g_adv']:<8.4f} {r['dual']:<8.4f} "
              f"{r['d_img']:<8.4f} {r['d_story']:<8.4f} {r['char']:<8.4f} {r['lr']:<9.2e}")

    stats = db.get_run_stats(run_id)
    if stats:
        print(f"\n📈 Mean dual loss: {_fmt(stats['mean_dual'], '.4f')}   🏆 Best val char-F1: {_fmt(stats['best_val_char_f1'])}")


def show_reports(db, limit=10):
    """Display recent metric reports"""
    reports = db.get_recent_reports(limit)

    print("\n" + "="*110)
    print("📊 Recent Metric Reports:")
    print("="*110)

    if not reports:
        print("📝 No reports yet")
        return

    print(f"{'ID':<4} {'Checkpoint':<24} {'Split':<6} {'Char F1':<8} {'Exact':<7} {'BLEU2':<7} {'BLEU3':<7} "
          f"{'Top1':<7} {'Top2':<7} {'R-prec':<14}")
    print("-"*110)
    for r in reports:
        checkpoint = Path(str(r["checkpoint"] or "-")).name
        r_prec = f"{r['r_precision_mean']:.2f} ± {r['r_precision_std']:.2f}"
        print(f"{r['id']:<4} {checkpoint[:23]:<24} {r['split']:<6} {r['char_f1']:<8.2f} {r['char_exact_match']:<7.2f} "
              f"{r['bleu2']:<7.2f} {r['bleu3']:<7.2f} {r['disc_top1']:<7.2f} {r['disc_top2']:<7.2f} {r_prec:<14}")


def get_database_summary(db):
    """General database summary"""
    runs = db.get_runs(limit=-1)
    reports = db.get_recent_reports(limit=-1)
    best = db.get_best_checkpoint()

    print("\n" + "="*60)
    print("🎯 Story Visualization Run Summary")
    print("="*60)
    print(f"🏃 Runs: {len(runs)} ({sum(r['status'] == 'finished' for r in runs)} finished)")
    print(f"🔁 Training steps logged: {sum(r['steps_logged'] for r in runs):,}")
    print(f"📊 Metric reports: {len(reports)}")
    if best:
        print(f"🏆 Best checkpoint: {best['path']} (run {best['run_id']}, val char-F1 {best['val_char_f1']:.2f})")
    if reports:
        top = max(reports, key=lambda r: r["char_f1"])
        print(f"🔥 Best reported char-F1: {top['char_f1']:.2f} ({top['split']}, report {top['id']})")
    print("="*60)


def export_reports_to_csv(db, directory="."):
    """Export every metric report to a CSV file; returns its path"""
    reports = db.get_recent_reports(limit=-1)
    filename = Path(directory) / f"metric_reports_{datetime.now().strftime('%Y%m%d_%H%M%S')}.csv"
    columns = ["id", "run_id", "checkpoint", "split", "seed", "char_f1", "char_exact_match", "bleu2", "bleu3",
               "disc_top1", "disc_top2", "r_precision_mean", "r_precision_std", "created_at"]

    with open(filename, 'w', newline='', encoding='utf-8') as csvfile:
        writer = csv.DictWriter(csvfile, fieldnames=columns)
        writer.writeheader()
        writer.writerows(reports)

    print(f"✅ {len(reports)} reports exported to file: {filename}")
    return filename


def main_menu(db):
    """Main menu"""
    while True:
        print("\n" + "="*50)
        print("🗄️  Story Visualization Run Database")
        print("="*50)
        print("1. 🏃 Show Runs")
        print("2. 📉 Show Run Losses")
        print("3. 📊 Show Metric Reports")
        print("4. 🎯 Summary")
        print("5. 💾 Export Reports to CSV")
        print("0. 🚪 Exit")
        print("-"*50)

        choice = input("Choose option (0-5): ").strip()

        if choice == '1':
            show_runs(db)
        elif choice == '2':
            show_runs(db)
            run_id = input("\nEnter Run ID: ").strip()
            if run_id.isdigit():
                every = input("Show every n-th step (default: 1): ").strip()
                show_run_losses(db, int(run_id), int(every) if every.isdigit() else 1)
            else:
                print("❌ Invalid Run ID")
        elif choice == '3':
            limit = input("How many reports to show? (default: 10): ").strip()
            show_reports(db, int(limit) if limit.isdigit() else 10)
        elif choice == '4':
            get_database_summary(db)
        elif choice == '5':
            export_reports_to_csv(db)
        elif choice == '0':
            print("👋 Goodbye!")
            break
        else:
            print("❌ Invalid choice")

        input("\nPress Enter to continue...")


if __name__ == "__main__":
    print("🚀 Loading the run database viewer...")
    database = open_db(sys.argv[1] if len(sys.argv) > 1 else None)
    if database is not None:
        main_menu(database)
