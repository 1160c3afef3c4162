import json
import logging
import sqlite3

logger = logging.getLogger(__name__)


class RunDatabase:
    """Training runs, checkpoints, loss records and metric reports in one sqlite file."""

    def __init__(self, db_path="runs.db"):
        self.db_path = str(db_path)
        self.init_database()

    def _connect(self):
        conn = sqlite3.connect(self.db_path, timeout=20.0)
        conn.execute("PRAGMA foreign_keys = ON")
        return conn

    def init_database(self):
        conn = self._connect()
        cursor = conn.cursor()

        cursor.execute('''
            CREATE TABLE IF NOT EXISTS runs (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                name TEXT NOT NULL,
                preset TEXT NOT NULL,
                seed INTEGER NOT NULL,
                config_hash TEXT NOT NULL,
                config TEXT NOT NULL,  -- JSON
                status TEXT DEFAULT 'running',
                started_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP,
                finished_at TIMESTAMP
            )
        ''')

        cursor.execute('''
            CREATE TABLE IF NOT EXISTS loss_records (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                run_id INTEGER NOT NULL,
                step INTEGER NOT NULL,
                epoch INTEGER NOT NULL,
                kl REAL, g_adv REAL, dual REAL,
                d_img REAL, d_story REAL, char_loss REAL,
                lr REAL, lr_d REAL,
                FOREIGN KEY (run_id) REFERENCES runs (id)
            )
        ''')

        cursor.execute('''
            CREATE TABLE IF NOT EXISTS checkpoints (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                run_id INTEGER NOT NULL,
                path TEXT NOT NULL,
                epoch INTEGER NOT NULL,
                step INTEGER NOT NULL,
                val_char_f1 REAL,
                created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP,
                FOREIGN KEY (run_id) REFERENCES runs (id)
            )
        ''')

        cursor.execute('''
            CREATE TABLE IF NOT EXISTS metric_reports (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                run_id INTEGER,
                checkpoint TEXT,
                split TEXT NOT NULL,
                seed INTEGER NOT NULL,
                char_f1 REAL NOT NULL,
                char_exact_match REAL NOT NULL,
                bleu2 REAL NOT NULL,
                bleu3 REAL NOT NULL,
                disc_top1 REAL NOT NULL,
                disc_top2 REAL NOT NULL,
                r_precision_mean REAL NOT NULL,
                r_precision_std REAL NOT NULL,
                report TEXT NOT NULL,  -- JSON
                report_path TEXT,
                created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP
            )
        ''')

        cursor.execute('''
            CREATE TABLE IF NOT EXISTS run_stats (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                run_id INTEGER UNIQUE NOT NULL,
                steps_logged INTEGER DEFAULT 0,
                last_step INTEGER DEFAULT 0,
                mean_dual REAL DEFAULT 0,
                best_val_char_f1 REAL,
                last_updated TIMESTAMP DEFAULT CURRENT_TIMESTAMP,
                FOREIGN KEY (run_id) REFERENCES runs (id)
            )
        ''')

        cursor.execute('CREATE INDEX IF NOT EXISTS idx_loss_run_step ON loss_records (run_id, step)')

        conn.commit()
        conn.close()
        logger.debug("✅ run database ready at %s", self.db_path)

    # runs

    def create_run(self, name, cfg):
        conn = None
        try:
            conn = self._connect()
            cursor = conn.cursor()
            cursor.execute('''
                INSERT INTO runs (name, preset, seed, config_hash, config)
                VALUES (?, ?, ?, ?, ?)
            ''', (name, cfg.preset, cfg.seed, cfg.model_hash(), json.dumps(cfg.to_dict())))
            run_id = cursor.lastrowid
            cursor.execute('INSERT INTO run_stats (run_id) VALUES (?)', (run_id,))
            conn.commit()
            logger.info("✅ run %d created: %s", run_id, name)
            return run_id
        except sqlite3.OperationalError as e:
            logger.error("❌ database error: %s", e)
            if conn:
                conn.rollback()
            raise
        finally:
            if conn:
                conn.close()

    def finish_run(self, run_id, status="finished"):
        conn = None
        try:
            conn = self._connect()
            conn.execute(
                'UPDATE runs SET status = ?, finished_at = CURRENT_TIMESTAMP WHERE id = ?', (status, run_id)
            )
            conn.commit()
        finally:
            if conn:
                conn.close()

    def get_runs(self, limit=20):
        conn = None
        try:
            conn = self._connect()
            cursor = conn.cursor()
            cursor.execute('''
                SELECT r.id, r.name, r.preset, r.seed, r.config_hash, r.status, r.started_at, r.finished_at,
                       s.steps_logged, s.last_step, s.best_val_char_f1
                FROM runs r LEFT JOIN run_stats s ON s.run_id = r.id
                ORDER BY r.id DESC
                LIMIT ?
            ''', (limit,))
            return [{
                'id': row[0],
                'name': row[1],
                'preset': row[2],
                'seed': row[3],
                'config_hash': row[4],
                'status': row[5],
                'started_at': row[6],
                'finished_at': row[7],
                'steps_logged': row[8] or 0,
                'last_step': row[9] or 0,
                'best_val_char_f1': row[10],
            } for row in cursor.fetchall()]
        except sqlite3.OperationalError as e:
            logger.error("❌ error reading runs: %s", e)
            return []
        finally:
            if conn:
                conn.close()

    def get_run(self, run_id):
        for run in self.get_runs(limit=-1):
            if run['id'] == run_id:
                return run
        return None

    # losses

    def add_loss_record(self, run_id, record):
        conn = None
        try:
            conn = self._connect()
            cursor = conn.cursor()
            cursor.execute('''
                INSERT INTO loss_records (run_id, step, epoch, kl, g_adv, dual, d_img, d_story, char_loss, lr, lr_d)
                VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
            ''', (run_id, record['step'], record['epoch'], record['kl'], record['g_adv'], record['dual'],
                  record['d_img'], record['d_story'], record['char'], record['lr'], record.get('lr_d')))
            self._update_run_stats_in_same_connection(cursor, run_id, record['step'], record['dual'])
            conn.commit()
        except sqlite3.OperationalError as e:
            logger.error("❌ database error: %s", e)
            if conn:
                conn.rollback()
            raise
        finally:
            if conn:
                conn.close()

    def _update_run_stats_in_same_connection(self, cursor, run_id, step, dual):
        cursor.execute('SELECT steps_logged, mean_dual FROM run_stats WHERE run_id = ?', (run_id,))
        existing = cursor.fetchone()
        if existing:
            steps, mean_dual = existing
            new_mean = (mean_dual * steps + dual) / (steps + 1)
            cursor.execute('''
                UPDATE run_stats SET
                    steps_logged = ?,
                    last_step = ?,
                    mean_dual = ?,
                    last_updated = CURRENT_TIMESTAMP
                WHERE run_id = ?
            ''', (steps + 1, step, new_mean, run_id))
        else:
            cursor.execute('''
                INSERT INTO run_stats (run_id, steps_logged, last_step, mean_dual)
                VALUES (?, ?, ?, ?)
            ''', (run_id, 1, step, dual))

    def get_loss_progress(self, run_id, every=1):
        """Loss records of one run, keeping every ``every``-th step."""
        conn = None
        try:
            conn = self._connect()
            cursor = conn.cursor()
            cursor.execute('''
                SELECT step, epoch, kl, g_adv, dual, d_img, d_story, char_loss, lr, lr_d
                FROM loss_records
                WHERE run_id = ? AND step % ? = 0
                ORDER BY step
            ''', (run_id, max(int(every), 1)))
            keys = ('step', 'epoch', 'kl', 'g_adv', 'dual', 'd_img', 'd_story', 'char', 'lr', 'lr_d')
            return [dict(zip(keys, row)) for row in cursor.fetchall()]
        except sqlite3.OperationalError as e:
            logger.error("❌ error reading losses: %s", e)
            return []
        finally:
            if conn:
                conn.close()

    # checkpoints

    def add_checkpoint(self, run_id, path, epoch, step, val_char_f1=None):
        conn = None
        try:
            conn = self._connect()
            cursor = conn.cursor()
            cursor.execute('''
                INSERT INTO checkpoints (run_id, path, epoch, step, val_char_f1)
                VALUES (?, ?, ?, ?, ?)
            ''', (run_id, path, epoch, step, val_char_f1))
            checkpoint_id = cursor.lastrowid
            if val_char_f1 is not None:
                cursor.execute('''
                    UPDATE run_stats SET best_val_char_f1 = MAX(COALESCE(best_val_char_f1, ?), ?)
                    WHERE run_id = ?
                ''', (val_char_f1, val_char_f1, run_id))
            conn.commit()
            return checkpoint_id
        finally:
            if conn:
                conn.close()

    def get_best_checkpoint(self, run_id=None):
        """Checkpoint with the highest validation char-F1, optionally within one run."""
        conn = None
        try:
            conn = self._connect()
            cursor = conn.cursor()
            query = 'SELECT run_id, path, epoch, step, val_char_f1 FROM checkpoints WHERE val_char_f1 IS NOT NULL'
            params = ()
            if run_id is not None:
                query += ' AND run_id = ?'
                params = (run_id,)
            cursor.execute(query + ' ORDER BY val_char_f1 DESC, step ASC LIMIT 1', params)
            row = cursor.fetchone()
            if not row:
                return None
            return {'run_id': row[0], 'path': row[1], 'epoch': row[2], 'step': row[3], 'val_char_f1': row[4]}
        finally:
            if conn:
                conn.close()

    # reports

    def save_metric_report(self, report, run_id=None, report_path=None):
        meta = report.metadata or {}
        conn = None
        try:
            conn = self._connect()
            cursor = conn.cursor()
            cursor.execute('''
                INSERT INTO metric_reports (run_id, checkpoint, split, seed, char_f1, char_exact_match, bleu2, bleu3,
                                            disc_top1, disc_top2, r_precision_mean, r_precision_std, report, report_path)
                VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
            ''', (run_id, meta.get('checkpoint'), meta.get('split', 'val'), meta.get('seed', 0),
                  report.char_f1, report.char_exact_match, report.bleu2, report.bleu3,
                  report.disc_top1, report.disc_top2, report.r_precision_mean, report.r_precision_std,
                  report.to_json(), str(report_path) if report_path else None))
            report_id = cursor.lastrowid
            conn.commit()
            logger.info("✅ report %d stored: char-F1 %.2f, BLEU-2 %.2f", report_id, report.char_f1, report.bleu2)
            return report_id
        except sqlite3.OperationalError as e:
            logger.error("❌ database error: %s", e)
            if conn:
                conn.rollback()
            raise
        finally:
            if conn:
                conn.close()

    def get_recent_reports(self, limit=10):
        conn = None
        try:
            conn = self._connect()
            cursor = conn.cursor()
            cursor.execute('''
                SELECT id, run_id, checkpoint, split, seed, char_f1, char_exact_match, bleu2, bleu3,
                       disc_top1, disc_top2, r_precision_mean, r_precision_std, created_at
                FROM metric_reports
                ORDER BY id DESC
                LIMIT ?
            ''', (limit,))
            keys = ('id', 'run_id', 'checkpoint', 'split', 'seed', 'char_f1', 'char_exact_match', 'bleu2', 'bleu3',
                    'disc_top1', 'disc_top2', 'r_precision_mean', 'r_precision_std', 'created_at')
            return [dict(zip(keys, row)) for row in cursor.fetchall()]
        except sqlite3.OperationalError as e:
            logger.error("❌ error reading reports: %s", e)
            return []
        finally:
            if conn:
                conn.close()

    def get_report(self, report_id):
        conn = None
        try:
            conn = self._connect()
            cursor = conn.cursor()
            cursor.execute('SELECT report, report_path FROM metric_reports WHERE id = ?', (report_id,))
            row = cursor.fetchone()
            if not row:
                return None
            report = json.loads(row[0])
            report['report_path'] = row[1]
            return report
        finally:
            if conn:
                conn.close()

    def get_run_stats(self, run_id):
        conn = None
        try:
            conn = self._connect()
            cursor = conn.cursor()
            cursor.execute('''
                SELECT steps_logged, last_step, mean_dual, best_val_char_f1, last_updated
                FROM run_stats WHERE run_id = ?
            ''', (run_id,))
            row = cursor.fetchone()
            if not row:
                return None
            return {
                'steps_logged': row[0],
                'last_step': row[1],
                'mean_dual': row[2],
                'best_val_char_f1': row[3],
                'last_updated': row[4],
            }
        finally:
            if conn:
                conn.close()
