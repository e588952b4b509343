import logging

import numpy as np
import pandas as pd
import plotly.graph_objects as go

logger = logging.getLogger(__name__)

METRIC_COLUMNS = [
    't', 'accuracy', 'mean_bpp', 'cum_bytes', 'mean_delta', 'mean_delta_prime', 'spurious_flips',
    'kappa', 'round_bytes', 'participants', 'dense_fallbacks', 'bound_empirical', 'bound',
]


class DataProcessor:

    @staticmethod
    def metrics_frame(metrics):
        """One row per round, one metric per column (plot-ready)"""
        if not metrics:
            return pd.DataFrame(columns=METRIC_COLUMNS)
        df = pd.DataFrame([m.as_row() for m in metrics], columns=METRIC_COLUMNS)
        # bound columns only exist when the error-bound harness ran
        if df['bound'].isna().all():
            df = df.drop(columns=['bound_empirical', 'bound'])
        return df

    @staticmethod
    def client_frame(metrics):
        """Long table of per-client bitrates, one row per (round, client)"""
        rows = [
            {'t': m.round, 'client': client, 'bpp': bpp}
            for m in metrics
            for client, bpp in zip(m.clients, m.client_bpp)
        ]
        return pd.DataFrame(rows, columns=['t', 'client', 'bpp'])

    @staticmethod
    def summarize_run(df, summary=None):
        """
        Combine the metrics table with the simulator summary.

        Args:
            df: metrics_frame output
            summary: dict returned by run_experiment (may be None)

        Returns:
            dict of run-level figures
        """
        result = dict(summary or {})
        if df.empty:
            result.update({'rounds': 0, 'best_accuracy': result.get('probe_accuracy', 0.0),
                           'avg_bpp': 0.0, 'total_bytes': 0})
            return result

        result['rounds'] = int(len(df))
        result['best_accuracy'] = float(df['accuracy'].max())
        result['final_accuracy'] = float(df['accuracy'].iloc[-1])
        result['avg_bpp'] = float(df['mean_bpp'].mean())
        result['total_bytes'] = int(df['cum_bytes'].iloc[-1])
        # bpp after the first round, where deltas are already sparse
        tail = df[df['t'] > df['t'].min()]
        result['avg_bpp_after_first'] = float(tail['mean_bpp'].mean()) if not tail.empty else float('nan')
        result['mean_delta'] = float(df['mean_delta'].mean())
        return result

    @staticmethod
    def moving_average(series, window=5):
        return series.rolling(window=window, min_periods=1).mean()

    @staticmethod
    def dataset_frame(dataset, client=None):
        """Features as x0..x{D-1} plus label (and client id when given)"""
        columns = [f'x{i}' for i in range(dataset.dim)]
        df = pd.DataFrame(dataset.features, columns=columns)
        df['label'] = dataset.labels
        if client is not None:
            df.insert(0, 'client', np.full(dataset.sample_count, client, dtype=np.int64))
        return df

    @staticmethod
    def shard_frame(shards):
        """All client shards stacked into one table"""
        frames = [DataProcessor.dataset_frame(shard, client) for client, shard in enumerate(shards)]
        return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()

    @staticmethod
    def bench_frame(rows):
        df = pd.DataFrame(rows)
        if not df.empty:
            df = df.sort_values(['layout', 'bits_per_entry']).reset_index(drop=True)
        return df

    @staticmethod
    def _trend_chart(df, column, title, yaxis_title, color, window=5):
        if df.empty:
            return None

        fig = go.Figure()

        # Add per-round values
        fig.add_trace(go.Scatter(
            x=df['t'],
            y=df[column],
            name='Per round',
            mode='markers',
            marker=dict(color='rgba(135, 206, 250, 0.6)', size=7),
            hovertemplate='Round %{x}<br>%{y:.4f}'
        ))

        # Add rolling average
        fig.add_trace(go.Scatter(
            x=df['t'],
            y=DataProcessor.moving_average(df[column], window),
            name=f'{window}-round rolling avg',
            mode='lines',
            line=dict(color=color, width=3),
            hovertemplate='Round %{x}<br>avg %{y:.4f}'
        ))

        fig.update_layout(
            title=title,
            xaxis_title='Round',
            yaxis_title=yaxis_title,
            height=400,
            margin=dict(l=20, r=20, t=50, b=20),
            hovermode='closest',
            template='plotly_white',
            legend=dict(orientation="h", yanchor="bottom", y=1.02, xanchor="center", x=0.5)
        )
        return fig

    @staticmethod
    def create_accuracy_chart(df, window=5):
        """Test accuracy per round with a rolling average"""
        return DataProcessor._trend_chart(df, 'accuracy', 'Global model accuracy', 'Accuracy',
                                          '#0072B2', window)

    @staticmethod
    def create_bitrate_chart(df, window=5):
        """Mean upload bits per parameter per round with a rolling average"""
        return DataProcessor._trend_chart(df, 'mean_bpp', 'Upload bitrate', 'Bits per parameter',
                                          '#D55E00', window)
