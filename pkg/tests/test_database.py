import math

from mcvos.database import Database
from mcvos.metrics import MetricReport


def report(dataset, auroc, label='run', ratio_ft=math.nan):
    return MetricReport(label=label, dataset=dataset, fpr95_id=0.5, auroc=auroc, aupr_id=0.7,
                        aupr_ood=0.6, fpr95_ood=0.4, accuracy=math.nan, ece=0.05, ratio_ft=ratio_ft)


def test_save_and_get_reports(tmp_path):
    db = Database(str(tmp_path / 'results.sqlite3'))
    db.initialize()
    try:
        db.save_run(run_key='a/seed-0', command='eval', label='a', config={'seed': 0, 'hidden': [8, 8]})
        db.save_reports(run_key='a/seed-0', reports=[report('far', 0.9, label='a', ratio_ft=2.0),
                                                     report('near', 0.8, label='a')])
        db.save_run(run_key='b/seed-0', command='eval', label='b', config={'seed': 0})
        db.save_reports(run_key='b/seed-0', reports=[report('far', 0.7, label='b')])
        db.save_reports(run_key='b/seed-0', reports=[])

        [run_a, run_b] = db.get_runs()
        assert run_a.run_key == 'a/seed-0'
        assert run_a.config == {'seed': 0, 'hidden': [8, 8]}
        assert run_b.label == 'b'
        assert [run.run_key for run in db.get_runs(labels=['b'])] == ['b/seed-0']

        reports = db.get_reports()
        assert [(r.label, r.dataset) for r in reports] == [('a', 'far'), ('a', 'near'), ('b', 'far')]
        assert reports[0].auroc == 0.9
        assert reports[0].ratio_ft == 2.0
        assert math.isnan(reports[0].accuracy)
        assert math.isnan(reports[1].ratio_ft)
        assert reports[0].histogram is None
        assert len(db.get_reports(labels=['a'])) == 2
        assert len(db.get_reports(run_keys=['b/seed-0'])) == 1
    finally:
        db.close()


def test_saving_replaces_existing_rows(tmp_path):
    db = Database(str(tmp_path / 'results.sqlite3'))
    db.initialize()
    try:
        db.save_run(run_key='a/seed-0', command='eval', label='a', config={})
        db.save_run(run_key='a/seed-0', command='eval', label='renamed', config={'seed': 1})
        db.save_reports(run_key='a/seed-0', reports=[report('far', 0.9)])
        db.save_reports(run_key='a/seed-0', reports=[report('far', 0.6)])

        [run] = db.get_runs()
        assert run.label == 'renamed'
        assert run.config == {'seed': 1}
        [stored] = db.get_reports()
        assert stored.auroc == 0.6
    finally:
        db.close()


def test_in_memory_database():
    db = Database(':memory:')
    db.initialize()
    try:
        assert db.get_runs() == []
        assert db.get_reports() == []
    finally:
        db.close()
