from fractions import Fraction

import pytest

from coldboot.errors import MetricError, ReportError
from coldboot.profiler import (Edge, JobRecord, Stage, analyze, cluster_report, compute_durations, format_event,
                               lower_median, max_median_ratio, parse_log, read_logs, scale_bucket,
                               straggler_stats, write_analysis, write_report)
from oracles import SINGLE_JOB_T0, SINGLE_JOB_TRAINING_S, single_job_lines

S = 1000


def fixture_record():
    events, _ = parse_log(single_job_lines())
    end = SINGLE_JOB_T0 + 174 * S
    spans = {n: [(end, end + SINGLE_JOB_TRAINING_S * S)] for n in ("n0", "n1", "n2")}
    return JobRecord("fixture", 8, events, spans)


def test_line_format_is_exact():
    line = format_event(12, "j", 3, Stage.ModelInitialization, Edge.end)
    assert line == "BOOTSTAGE ts=12 job=j node=3 stage=ModelInitialization edge=end"
    events, rep = parse_log([line])
    assert events[0].format() == line and rep.malformed_count == 0


def test_malformed_lines_are_counted_not_fatal():
    lines = ["BOOTSTAGE ts=1 job=j node=0 stage=ImageLoading edge=begin",
             "", "garbage", "BOOTSTAGE ts=x job=j node=0 stage=ImageLoading edge=end",
             "BOOTSTAGE ts=2 job=j node=0 stage=Teleport edge=end",
             "BOOTSTAGE ts=3 job=j node=0 stage=ImageLoading edge=end  "]
    events, rep = parse_log(lines)
    assert len(events) == 1
    assert rep.malformed_count == 4 and rep.malformed_lines == [3, 4, 5, 6]


def test_events_sorted_with_stable_tiebreak():
    lines = [format_event(5, "j", 10, Stage.ImageLoading, Edge.begin),
             format_event(5, "j", 2, Stage.ImageLoading, Edge.begin),
             format_event(1, "j", 2, Stage.ResourceAllocation, Edge.end)]
    events, _ = parse_log(lines)
    assert [(e.ts, e.node_id) for e in events] == [(1, "2"), (5, "2"), (5, "10")]


def test_fixture_hand_computed_durations():
    d = compute_durations(parse_log(single_job_lines())[0])
    n2 = d.node("fixture", "n2")
    assert n2.durations == {Stage.ResourceQueuing: 10 * S, Stage.ResourceAllocation: 2 * S,
                            Stage.ImageLoading: 30 * S, Stage.EnvironmentSetup: 92 * S,
                            Stage.ModelInitialization: 40 * S}
    assert d.node("fixture", "n0").durations[Stage.EnvironmentSetup] == 60 * S
    assert d.node("fixture", "n0").barrier_wait[Stage.EnvironmentSetup] == 32 * S
    assert n2.barrier_wait[Stage.EnvironmentSetup] == 0
    job = d.job("fixture")
    assert job.kind == "full" and job.job_level_total == 174 * S
    assert job.stage_duration[Stage.EnvironmentSetup] == 92 * S


def test_fixture_env_ratio():
    d = compute_durations(parse_log(single_job_lines())[0])
    [st] = straggler_stats(d, Stage.EnvironmentSetup)
    assert (st.count, st.median, st.max) == (3, 60 * S, 92 * S)
    assert st.max_median_ratio == 92 / 60


def test_lower_median():
    assert lower_median([4, 1, 3, 2]) == 2
    assert lower_median([5]) == 5
    assert max_median_ratio([60, 60, 92]) == 92 / 60
    with pytest.raises(MetricError):
        lower_median([])
    with pytest.raises(MetricError):
        max_median_ratio([0, 0, 1])


def hot_update_lines(t):
    out = []
    for node in ("0", "1"):
        out += [format_event(t, "j", node, Stage.EnvironmentSetup, Edge.begin),
                format_event(t + 5, "j", node, Stage.EnvironmentSetup, Edge.end),
                format_event(t + 5, "j", node, Stage.ModelInitialization, Edge.begin),
                format_event(t + 9, "j", node, Stage.ModelInitialization, Edge.end)]
    return out


def full_lines(t):
    out = []
    for node in ("0", "1"):
        for k, stage in enumerate(Stage):
            out += [format_event(t + 2 * k, "j", node, stage, Edge.begin),
                    format_event(t + 2 * k + 1, "j", node, stage, Edge.end)]
    return out


def test_startups_segmented_and_hot_updates_classified():
    d = compute_durations(parse_log(full_lines(0) + hot_update_lines(100) + hot_update_lines(200))[0])
    assert sorted(d.jobs) == [("j", 0), ("j", 1), ("j", 2)]
    assert [d.job("j", i).kind for i in range(3)] == ["full", "hot_update", "hot_update"]
    assert d.job("j", 1).job_level_total == 9
    assert d.node("j", "1", 2).node_level_total == 9


def test_incomplete_startup_excluded():
    lines = full_lines(0)
    lines.remove(format_event(7, "j", "1", Stage.EnvironmentSetup, Edge.end))
    d = compute_durations(parse_log(lines)[0])
    assert [(i.node_id, i.stage, i.reason) for i in d.incomplete] == [
        ("1", Stage.EnvironmentSetup, "begin without end")]
    assert [n.node_id for n in d.nodes_of("j")] == ["0"]
    assert Stage.ImageLoading in d.partial[("j", 0, "1")]


def test_orphan_end():
    lines = [format_event(3, "j", "0", Stage.ImageLoading, Edge.end)]
    d = compute_durations(parse_log(lines)[0])
    assert d.incomplete[0].reason == "end without begin" and not d.jobs


def test_single_job_startup_share_is_one_thirtieth():
    report = cluster_report([fixture_record()])
    assert Fraction(report.startup_share).limit_denominator(1000) == Fraction(1, 30)
    assert f"{report.startup_share:.2%}" == "3.33%"
    assert report.startup_gpu_share == pytest.approx(report.startup_share)
    [job] = report.jobs
    assert (job.nodes, job.gpus, job.full_startups, job.hot_updates) == (3, 24, 1, 0)
    assert job.env_max_median == 92 / 60
    assert job.startup_server_hours == pytest.approx(3 * 162 / 3600)


def test_overlapping_training_and_startup_rejected():
    rec = fixture_record()
    rec.training_spans["n1"] = [(SINGLE_JOB_T0 + 100 * S, SINGLE_JOB_T0 + 500 * S)]
    with pytest.raises(ReportError) as exc:
        cluster_report([rec])
    assert exc.value.conflicts and exc.value.conflicts[0][1] == "n1"


def test_job_record_dict_roundtrip():
    rec = fixture_record()
    again = JobRecord.from_dict(rec.to_dict())
    assert again == rec


def test_scale_buckets():
    assert [scale_bucket(g) for g in (1, 8, 9, 128, 129, 4096)] == ["1-8", "1-8", "9-32", "33-128", "129-512",
                                                                     ">2048"]


def test_outputs_written(tmp_path):
    (tmp_path / "logs").mkdir()
    (tmp_path / "logs" / "a.log").write_text("\n".join(single_job_lines()[:10]) + "\n")
    (tmp_path / "logs" / "b.log").write_text("\n".join(single_job_lines()[10:]) + "\nnoise\n")
    lines = read_logs(tmp_path / "logs")
    a = analyze(lines)
    assert a.report.malformed_count == 1
    names = sorted(p.name for p in write_analysis(a, tmp_path / "an"))
    assert names == ["analysis.json", "max_median.svg", "stage_spans.svg", "stages.csv"]
    rows = (tmp_path / "an" / "stages.csv").read_text().splitlines()
    assert rows[0].startswith("job_id,startup,node_id,stage") and len(rows) == 16
    paths = write_report(cluster_report([fixture_record()]), tmp_path / "rep")
    assert {"jobs.csv", "scales.csv", "report.json"} <= {p.name for p in paths}
