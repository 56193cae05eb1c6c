import os
import json


class CheckLogger:
    def __init__(self, output_dir):
        self.log_file = os.path.join(output_dir, "checks.json")
        self.checks = []
        os.makedirs(output_dir, exist_ok=True)

    def log_check(self, name, passed, metadata=None):
        """Logs a named pass/fail check with metadata"""
        entry = {
            'name': name,
            'passed': bool(passed),
            'metadata': metadata or {}
        }
        self.checks.append(entry)
        self._save_to_file()
        return entry

    def _save_to_file(self):
        with open(self.log_file, 'w', encoding='utf-8') as f:
            json.dump(self.checks, f, indent=2, default=float)

    def get_checks(self):
        return self.checks

    def failed(self):
        return [c['name'] for c in self.checks if not c['passed']]
