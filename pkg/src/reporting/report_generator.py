import os
import logging

import matplotlib
matplotlib.use('Agg')

from jinja2 import Environment, FileSystemLoader, select_autoescape
import matplotlib.pyplot as plt


class ReportGenerator:
    def __init__(self, config, output_dir):
        self.config = config.get('reporting', {})
        self.output_dir = output_dir
        self.image_dir = os.path.join(self.output_dir, 'images')

        os.makedirs(self.output_dir, exist_ok=True)
        os.makedirs(self.image_dir, exist_ok=True)

        template_path = os.path.join(os.path.dirname(__file__), 'templates')
        self.template_env = Environment(
            loader=FileSystemLoader(template_path),
            autoescape=select_autoescape(['html'])
        )

        self.logger = logging.getLogger('ReportGenerator')

    def generate_report(self, manifest, checks, rate_reports=(), u_report=None, td_rows=None):
        """
        Render summary.html for one command.
        A failure here is logged and never changes the run's outcome.
        """
        try:
            images = []
            for report in rate_reports:
                images.append(self._generate_rate_plot(report))
                if report.gain_slope is not None:
                    images.append(self._generate_gain_plot(report))
            if u_report is not None:
                images.append(self._generate_u_plot(u_report))
            if td_rows:
                images.append(self._generate_td_plot(td_rows))

            report_data = {
                'manifest': manifest.to_dict(),
                'checks': checks,
                'failed': [c['name'] for c in checks if not c['passed']],
                'rate_reports': list(rate_reports),
                'u_report': u_report,
                'images': [os.path.relpath(p, self.output_dir) for p in images if p],
            }

            template = self.template_env.get_template('summary.html')
            html_content = template.render(report_data)

            html_path = os.path.join(self.output_dir, 'summary.html')
            with open(html_path, 'w', encoding='utf-8') as f:
                f.write(html_content)

            self.logger.info(f"HTML report generated at: {html_path}")
            return html_path

        except Exception as e:
            self.logger.warning(f"Report generation failed: {str(e)}")
            return None

    def _save(self, name):
        path = os.path.join(self.image_dir, name)
        plt.tight_layout()
        plt.savefig(path, dpi=150)
        plt.close()
        return path

    def _generate_rate_plot(self, report):
        try:
            rows = [row for row in report.rows if row['tau_n'] > 0]
            tau = [row['tau_n'] for row in rows]
            mean = [row['mean_residual'] for row in rows]
            surrogate = [row['surrogate'] for row in rows]

            plt.figure(figsize=(8, 5))
            plt.loglog(tau, mean, 'o-', markersize=4, label='mean residual')
            # overlay scaled to meet the curve at the tail start
            anchor = next((i for i, row in enumerate(rows) if row['n'] >= report.tail_start), 0)
            if mean and surrogate[anchor] > 0:
                scale = mean[anchor] / surrogate[anchor]
                plt.loglog(tau, [scale * s for s in surrogate], '--', label='C / sqrt(tau_n)')

            plt.title(f"Fixed-point residual, b = {report.b}, slope {report.slope:.3f}")
            plt.xlabel("tau_n")
            plt.ylabel("mean ||x_n - h(x_n)||")
            plt.grid(True, which='both', linestyle='--', alpha=0.6)
            plt.legend()
            return self._save(f'rate_b{report.b}.png')

        except Exception as e:
            self.logger.warning(f"Rate plot failed: {str(e)}")
            return None

    def _generate_gain_plot(self, report):
        try:
            n = [row['n'] for row in report.rows]
            err = [row['mean_sq_gain_err'] for row in report.rows]

            plt.figure(figsize=(8, 5))
            plt.loglog(n, err, 'o-', markersize=4)
            plt.title(f"Gain estimate, b = {report.b}, slope {report.gain_slope:.3f}")
            plt.xlabel("t")
            plt.ylabel("mean |J_t - J|^2")
            plt.grid(True, which='both', linestyle='--', alpha=0.6)
            return self._save(f'gain_b{report.b}.png')

        except Exception as e:
            self.logger.warning(f"Gain plot failed: {str(e)}")
            return None

    def _generate_u_plot(self, u_report):
        try:
            n = [row['n'] for row in u_report.rows]

            plt.figure(figsize=(8, 5))
            plt.loglog(n, [max(row['median_U'], 1e-300) for row in u_report.rows], 'o-', label='median ||U_n||')
            plt.loglog(n, [max(row['max_U'], 1e-300) for row in u_report.rows], 's--', label='max ||U_n||')
            plt.title(f"Aggregate noise U_n, b = {u_report.b}")
            plt.xlabel("n")
            plt.grid(True, which='both', linestyle='--', alpha=0.6)
            plt.legend()
            return self._save('u_n.png')

        except Exception as e:
            self.logger.warning(f"U_n plot failed: {str(e)}")
            return None

    def _generate_td_plot(self, rows):
        try:
            plt.figure(figsize=(8, 5))
            for replica in sorted({row['replica'] for row in rows}):
                mine = [row for row in rows if row['replica'] == replica and row['t'] > 0]
                plt.loglog([row['t'] for row in mine], [max(row['dist_V_star'], 1e-300) for row in mine],
                           alpha=0.6)
            plt.title("Distance to the fixed-point set")
            plt.xlabel("t")
            plt.ylabel("span(v_t - v_pi) / 2")
            plt.grid(True, which='both', linestyle='--', alpha=0.6)
            return self._save('td_distance.png')

        except Exception as e:
            self.logger.warning(f"TD plot failed: {str(e)}")
            return None
