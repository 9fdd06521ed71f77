# utils/analytics.py
import logging
import os
from typing import Dict, Optional

import numpy as np
import pandas as pd


class ExperimentAnalytics:
    """Summaries and the text report over the result CSVs of one output directory."""

    def __init__(self, out_dir: str = 'runs'):
        self.out_dir = out_dir
        self.logger = logging.getLogger(__name__)
        self.train = self._load_data('train_metrics.csv')
        self.evaluation = self._load_data('eval_rl.csv')
        self.comparison = self._load_data('compare.csv')

    def _load_data(self, name: str) -> pd.DataFrame:
        """Load one result table; a missing file gives an empty frame."""
        path = os.path.join(self.out_dir, name)
        if not os.path.exists(path):
            return pd.DataFrame()
        try:
            frame = pd.read_csv(path)
        except pd.errors.EmptyDataError:
            return pd.DataFrame()
        self.logger.debug(f"Loaded {len(frame)} rows from {path}")
        return frame

    def training_summary(self, window: int = 10) -> Dict:
        if self.train.empty:
            return {}
        recent = self.train.tail(window)
        return {
            'episodes': int(self.train['episode'].max()),
            'steps': int(self.train['step'].max()),
            'recent_return': float(recent['return'].mean()),
            'final_critic_loss': float(self.train['critic_loss'].iloc[-1]),
            'final_actor_objective': float(self.train['actor_objective'].iloc[-1]),
        }

    def evaluation_summary(self) -> pd.DataFrame:
        """Median and quartiles of the tail error per agent and evaluation mode."""
        if self.evaluation.empty:
            return pd.DataFrame()
        grouped = self.evaluation.groupby(['agent', 'mode'], sort=False)
        return pd.DataFrame({
            'rollouts': grouped.size(),
            'median_pct_error': grouped['tail_pct_error'].median(),
            'q25_pct_error': grouped['tail_pct_error'].quantile(0.25),
            'q75_pct_error': grouped['tail_pct_error'].quantile(0.75),
            'median_tail_reward': grouped['tail_reward'].median(),
        }).reset_index()

    def comparison_summary(self) -> pd.DataFrame:
        """Median, quartiles and the fraction of strictly negative values per agent and metric."""
        if self.comparison.empty:
            return pd.DataFrame()
        grouped = self.comparison.groupby(['agent', 'metric'], sort=False)['value']
        return pd.DataFrame({
            'median': grouped.median(),
            'q25': grouped.quantile(0.25),
            'q75': grouped.quantile(0.75),
            'negative_fraction': grouped.apply(lambda v: float(np.mean(v < 0))),
        }).reset_index()

    def violation_fraction(self, agent: str) -> float:
        """Share of rollouts where ``agent`` left the state constraints at least once."""
        values = self.metric_values(agent, 'time_outside_constraints')
        return float(np.mean(values < 0)) if len(values) else float('nan')

    def metric_values(self, agent: str, metric: str) -> np.ndarray:
        if self.comparison.empty:
            return np.array([])
        rows = self.comparison[(self.comparison['agent'] == agent) & (self.comparison['metric'] == metric)]
        return rows.sort_values('rollout')['value'].to_numpy()

    def paired_wins(self, agent: str, other: str, metric: str) -> float:
        """Share of paired rollouts where ``agent`` scores strictly higher than ``other``."""
        a, b = self.metric_values(agent, metric), self.metric_values(other, metric)
        if len(a) == 0 or len(a) != len(b):
            return float('nan')
        return float(np.mean(a > b))

    def generate_report(self, filename: Optional[str] = None) -> str:
        """Write ``summary.txt`` next to the CSVs and return its path."""
        filename = filename or os.path.join(self.out_dir, 'summary.txt')
        self._save_report(filename)
        return filename

    def _save_report(self, filename: str):
        lines = ["EXPERIMENT SUMMARY", "=" * 50, ""]

        training = self.training_summary()
        if training:
            lines.append("TRAINING:")
            lines.append(f"Episodes: {training['episodes']} ({training['steps']} steps)")
            lines.append(f"Mean return (last 10 episodes): {training['recent_return']:.4f}")
            lines.append(f"Final critic loss: {training['final_critic_loss']:.6g}")
            lines.append(f"Final actor objective: {training['final_actor_objective']:.6g}")
            lines.append("")

        evaluation = self.evaluation_summary()
        if not evaluation.empty:
            lines.append("RL EVALUATION (tail |% error|):")
            for row in evaluation.itertuples(index=False):
                lines.append(f"{row.agent} / {row.mode}: median {row.median_pct_error:.3f}% "
                             f"[{row.q25_pct_error:.3f}, {row.q75_pct_error:.3f}] over {row.rollouts} rollouts")
            lines.append("")

        comparison = self.comparison_summary()
        if not comparison.empty:
            lines.append("AGENT COMPARISON:")
            for agent in comparison['agent'].unique():
                lines.append(f"{agent}:")
                for row in comparison[comparison['agent'] == agent].itertuples(index=False):
                    lines.append(f"  {row.metric}: median {row.median:.4f} [{row.q25:.4f}, {row.q75:.4f}], "
                                 f"negative in {100 * row.negative_fraction:.1f}% of rollouts")
            lines.append("")

        directory = os.path.dirname(filename)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(filename, 'w') as f:
            f.write('\n'.join(lines) + '\n')
        self.logger.info(f"Summary written to {filename}")
