"""Tests for configuration loading, the run manifest and the command-line entry point."""

import csv
import json
import os

import pytest
import yaml

from cli.commands import SLOW_SERIES
from cli.config_loader import DEFAULTS, RunManifest, load_config, parse_config
from main import main
from reporting.csv_writer import format_value, write_rows
from schedules.step_size import SERIES_IDS
from utils.check_logger import CheckLogger
from utils.errors import ConfigParseError, ConfigValidationError
from utils.logging import EventLogger


def write_config(tmp_path, sections):
    sections = dict(sections)
    sections.setdefault('logging', {'log_path': str(tmp_path / 'logs')})
    sections.setdefault('reporting', {'enabled': False})
    path = tmp_path / 'config.yaml'
    path.write_text(yaml.safe_dump(sections), encoding='utf-8')
    return str(path)


def read_csv(path):
    with open(path, newline='', encoding='utf-8') as f:
        return list(csv.DictReader(f))


class TestLoadConfig:
    def test_minimal_config_fills_defaults(self, tmp_path):
        path = write_config(tmp_path, {
            'mdp': {'generate': {'n_states': 4, 'seed': 7}},
            'schedule': {'b': 0.9},
            'run': {'horizon': '1e6'},
        })
        config = load_config(path)
        assert config['run']['horizon'] == 1000000
        assert config['mdp']['generate'] == {'n_states': 4, 'n_actions': 2, 'seed': 7, 'mixing': 0.1}
        assert config['sweep']['b_values'] == [0.9]
        assert config['run']['threads'] >= 1
        assert set(config) == set(DEFAULTS)

    def test_b_outside_range(self, tmp_path):
        with pytest.raises(ConfigValidationError) as info:
            load_config(write_config(tmp_path, {'schedule': {'b': 0.5}}))
        assert info.value.field == 'schedule.b'

    def test_diagnostic_mode_only_for_schedules(self, tmp_path):
        path = write_config(tmp_path, {'schedule': {'b': 0.5, 'diagnostic_mode': True}})
        assert load_config(path, subcommand='check-schedules')['schedule']['b'] == 0.5
        with pytest.raises(ConfigValidationError):
            load_config(path, subcommand='rate-sweep')

    def test_row_not_summing_to_one(self, tmp_path):
        path = write_config(tmp_path, {'chain': {'transitions': [[0.5, 0.5], [0.4, 0.5]]}})
        with pytest.raises(ConfigValidationError) as info:
            load_config(path)
        assert info.value.field == 'chain.transitions[1]'
        assert "0.9" in str(info.value)

    def test_unknown_section(self, tmp_path):
        with pytest.raises(ConfigValidationError) as info:
            load_config(write_config(tmp_path, {'detector': {}}))
        assert info.value.field == 'detector'

    def test_parse_error_has_position(self, tmp_path):
        path = tmp_path / 'broken.yaml'
        path.write_text("run:\n  horizon: [1, 2\nschedule:\n  b: 0.9\n", encoding='utf-8')
        with pytest.raises(ConfigParseError) as info:
            load_config(str(path))
        assert info.value.line is not None
        assert info.value.exit_code == 2

    def test_overrides_win(self, tmp_path):
        path = write_config(tmp_path, {'schedule': {'b': 0.9}})
        config = load_config(path, {'b': 1.0, 'replicas': 5, 'horizon': None})
        assert config['schedule']['b'] == 1.0
        assert config['sweep']['b_values'] == [1.0]
        assert config['run']['replicas'] == config['sweep']['replicas'] == 5
        assert config['run']['horizon'] == DEFAULTS['run']['horizon']


class TestRunManifest:
    def test_written_and_read_back(self, tmp_path):
        path = write_config(tmp_path, {'output': {'path': str(tmp_path / 'out')}})
        manifest = parse_config(path, {'seed': 3}, 'verify-poisson')
        assert manifest.output_dir == os.path.join(str(tmp_path / 'out'), 'verify-poisson')
        assert manifest.base_seed == 3
        assert 'physical_cores' in manifest.host

        restored = RunManifest.read(manifest.write())
        assert restored.subcommand == 'verify-poisson'
        assert restored.base_seed == 3
        assert restored.config['schedule']['b'] == 0.9


class TestMain:
    def test_verify_poisson(self, tmp_path, capsys):
        path = write_config(tmp_path, {})
        out = tmp_path / 'results'
        assert main(['verify-poisson', '--config', path, '--output', str(out)]) == 0
        folder = out / 'verify-poisson'
        for name in ('manifest.yaml', 'checks.json', 'poisson.csv'):
            assert (folder / name).exists()
        checks = json.loads((folder / 'checks.json').read_text(encoding='utf-8'))
        assert checks[0]['name'] == 'poisson_identities' and checks[0]['passed']
        assert "1 checks passed, 0 failed" in capsys.readouterr().out

    def test_check_schedules(self, tmp_path):
        path = write_config(tmp_path, {})
        out = tmp_path / 'results'
        assert main(['check-schedules', '--config', path, '--b', '0.9', '--n', '1e6', '--output', str(out)]) == 0
        summary = read_csv(out / 'check-schedules' / 'series_summary.csv')
        assert [row['series_id'] for row in summary] == list(SERIES_IDS)
        assert all(row['bounded'] == 'true' for row in summary)
        series = read_csv(out / 'check-schedules' / 'series.csv')
        assert {row['series_id'] for row in series} == set(SERIES_IDS)

    def test_slow_series_failure_is_explained(self, tmp_path, capsys):
        path = write_config(tmp_path, {})
        out = tmp_path / 'results'
        assert main(['check-schedules', '--config', path, '--b', '0.81', '--n', '1e6', '--output', str(out)]) == 0
        checks = json.loads((out / 'check-schedules' / 'checks.json').read_text(encoding='utf-8'))
        bounded = next(check for check in checks if check['name'] == 'series_bounded')
        unbounded = bounded['metadata']['unbounded']
        assert set(unbounded) <= set(SLOW_SERIES)
        if unbounded:
            assert not bounded['passed']
            assert "expected" in bounded['metadata']['note']
            assert "note:" in capsys.readouterr().out

    def test_every_failed_check_reaches_event_log(self, tmp_path):
        path = write_config(tmp_path, {'sweep': {'slope_range': [5, 6], 'gain_slope_range': [5, 6]}})
        argv = ['rate-sweep', '--config', path, '--n', '2000', '--replicas', '2', '--threads', '1',
                '--output', str(tmp_path / 'out')]
        assert main(argv) == 0
        events = (tmp_path / 'logs' / 'events.log').read_text(encoding='utf-8')
        assert "CHECK_FAILED: slope_b0.9" in events
        assert "CHECK_FAILED: gain_slope_b0.9" in events

    def test_unknown_subcommand(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(['train'])
        assert info.value.code == 2
        assert "usage" in capsys.readouterr().err

    def test_invalid_config_exit_code(self, tmp_path):
        path = write_config(tmp_path, {'schedule': {'b': 0.5}})
        assert main(['verify-poisson', '--config', path, '--output', str(tmp_path / 'out')]) == 2

    def test_identical_runs_give_identical_csv(self, tmp_path):
        path = write_config(tmp_path, {})
        for name in ('first', 'second'):
            argv = ['run-td', '--config', path, '--n', '2000', '--replicas', '2', '--threads', '1',
                    '--output', str(tmp_path / name)]
            assert main(argv) == 0
        first = (tmp_path / 'first' / 'run-td' / 'td.csv').read_bytes()
        second = (tmp_path / 'second' / 'run-td' / 'td.csv').read_bytes()
        assert first == second

    def test_strict_mode_fails_on_check(self, tmp_path):
        path = write_config(tmp_path, {'schedule': {'b': 0.5, 'diagnostic_mode': True}})
        argv = ['check-schedules', '--config', path, '--n', '1e5', '--output', str(tmp_path / 'out')]
        assert main(argv) == 0
        assert main(argv + ['--strict']) == 3

    def test_rate_sweep_writes_report(self, tmp_path):
        path = write_config(tmp_path, {'reporting': {'enabled': True}})
        argv = ['rate-sweep', '--config', path, '--n', '2000', '--replicas', '3', '--threads', '1',
                '--output', str(tmp_path / 'out')]
        assert main(argv) == 0
        folder = tmp_path / 'out' / 'rate-sweep'
        assert (folder / 'summary.html').exists()
        rows = read_csv(folder / 'rate.csv')
        assert rows[0]['b'] == '0.90000000000000002'
        assert rows[-1]['n'] == '2000'

    def test_decompose_noise(self, tmp_path):
        path = write_config(tmp_path, {})
        argv = ['decompose-noise', '--config', path, '--n', '1000', '--replicas', '1', '--threads', '1',
                '--output', str(tmp_path / 'out')]
        assert main(argv) == 0
        folder = tmp_path / 'out' / 'decompose-noise'
        assert read_csv(folder / 'u_n.csv')
        assert read_csv(folder / 'decomposition.csv')[-1]['norm_U'] != ''


class TestCsvWriter:
    def test_format_value(self):
        assert format_value(None) == ''
        assert format_value(True) == 'true'
        assert format_value(0.1) == '0.10000000000000001'
        assert format_value(float('nan')) == 'nan'
        assert format_value(7) == '7'

    def test_missing_columns_are_empty(self, tmp_path):
        path = write_rows(str(tmp_path / 'rows.csv'), ('a', 'b'), [{'a': 1.5}])
        assert read_csv(path) == [{'a': '1.5', 'b': ''}]


class TestLoggers:
    def test_check_logger_tracks_failures(self, tmp_path):
        checks = CheckLogger(str(tmp_path))
        checks.log_check('first', True)
        checks.log_check('second', False, {'value': 2.0})
        assert checks.failed() == ['second']
        saved = json.loads((tmp_path / 'checks.json').read_text(encoding='utf-8'))
        assert saved[1]['metadata'] == {'value': 2.0}

    def test_event_cooldown(self, tmp_path):
        events = EventLogger({'logging': {'log_path': str(tmp_path), 'event_cooldown': 60}})
        assert events.log_event('check_failed', 'slope') is not None
        assert events.log_event('check_failed', 'slope') is None
        assert events.log_event('other', 'x') is not None
        assert len((tmp_path / 'events.log').read_text(encoding='utf-8').splitlines()) == 2

    def test_distinct_messages_share_a_type(self, tmp_path):
        events = EventLogger({'logging': {'log_path': str(tmp_path), 'event_cooldown': 60}})
        assert events.log_event('check_failed', 'slope_b0.9') is not None
        assert events.log_event('check_failed', 'gain_slope_b0.9') is not None
        assert events.log_event('check_failed', 'slope_b0.9') is None
        lines = (tmp_path / 'events.log').read_text(encoding='utf-8').splitlines()
        assert [line.split(': ', 1)[1] for line in lines] == ['slope_b0.9', 'gain_slope_b0.9']
