"""
Report writers: JSON, aligned text tables, confusion CSV and plotly figures.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

import pandas as pd
import plotly
import plotly.express as px

from .models import MetricsReport

logger = logging.getLogger(__name__)

# Dark theme shared by every figure
LAYOUT = dict(
    plot_bgcolor='#2d2d2d',
    paper_bgcolor='#2d2d2d',
    font=dict(family="Arial, sans-serif", size=14, color='#e0e0e0'),
    margin=dict(l=40, r=20, t=40, b=50),
)


def to_json(data: Any) -> str:
    return json.dumps(data, indent=2, sort_keys=True)


def report_to_json(report: MetricsReport, extra: Optional[Mapping[str, Any]] = None) -> str:
    return to_json({**report.to_dict(), **(extra or {})})


def metrics_table(reports: Mapping[str, MetricsReport]) -> str:
    """One row per named report, columns in table order (accuracy, precision, recall, f1, top-k, audio)"""
    if not reports:
        return '(no results)'
    df = pd.DataFrame([{'name': name, **report.summary()} for name, report in reports.items()])
    return df.set_index('name').to_string(float_format=lambda v: f"{v:.4f}", na_rep='-')


def per_class_table(report: MetricsReport) -> str:
    df = pd.DataFrame(report.per_class())
    if df.empty:
        return '(no classes)'
    return df.set_index('class').to_string(float_format=lambda v: f"{v:.4f}")


def confusion_frame(report: MetricsReport) -> pd.DataFrame:
    return pd.DataFrame(report.confusion, index=report.class_table, columns=report.class_table)


def write_confusion_csv(report: MetricsReport, path: Path) -> Path:
    """Rows are true classes, columns predicted classes"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    confusion_frame(report).to_csv(path, index_label='true\\predicted')
    return path


def confusion_figure(report: MetricsReport) -> str:
    """Plotly heatmap of the confusion matrix as JSON"""
    fig = px.imshow(
        confusion_frame(report),
        text_auto=True,
        color_continuous_scale='Viridis',
        labels=dict(x='Predicted', y='True', color='Clips'),
    )
    fig.update_layout(**LAYOUT, title='Confusion matrix')
    return json.dumps(fig, cls=plotly.utils.PlotlyJSONEncoder)


def training_curve_figure(history: Mapping[str, Any]) -> str:
    """Train/validation loss per epoch as plotly JSON"""
    rows = []
    for series in ('train_loss', 'val_loss'):
        for epoch, value in enumerate(history.get(series, []), start=1):
            rows.append({'epoch': epoch, 'loss': value, 'series': series})
    if not rows:
        fig = px.line()
        fig.add_annotation(text="No training history", xref="paper", yref="paper", x=0.5, y=0.5,
                           showarrow=False, font=dict(size=16, color="#7f8c8d"))
    else:
        fig = px.line(pd.DataFrame(rows), x='epoch', y='loss', color='series', markers=True)
        best = history.get('best_epoch')
        if best:
            fig.add_vline(x=best, line=dict(color='rgba(231, 76, 60, 0.8)', width=2, dash='dash'))
    fig.update_layout(**LAYOUT, title='Training curve')
    return json.dumps(fig, cls=plotly.utils.PlotlyJSONEncoder)


def ablation_frame(rows: Sequence[Any]) -> pd.DataFrame:
    return pd.DataFrame([row.to_dict() for row in rows],
                        columns=['plan', 'image_count', 'accuracy', 'audio_accuracy', 'error'])


def ablation_table(rows: Sequence[Any]) -> str:
    df = ablation_frame(rows)
    if df.empty:
        return '(no plans)'
    return df.to_string(index=False, float_format=lambda v: f"{v:.4f}", na_rep='-')


def ablation_figure(rows: Sequence[Any]) -> str:
    df = ablation_frame(rows).dropna(subset=['accuracy'])
    # Wide-form bars need both columns numeric
    df = df.astype({'accuracy': float, 'audio_accuracy': float})
    if df.empty:
        fig = px.bar()
        fig.add_annotation(text="No successful plans", xref="paper", yref="paper", x=0.5, y=0.5,
                           showarrow=False, font=dict(size=16, color="#7f8c8d"))
    else:
        fig = px.bar(df, x='plan', y=['accuracy', 'audio_accuracy'], barmode='group')
    fig.update_layout(**LAYOUT, title='Augmentation ablation', yaxis=dict(range=[0, 1]))
    return json.dumps(fig, cls=plotly.utils.PlotlyJSONEncoder)


def write_text(path: Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text if text.endswith('\n') else text + '\n', encoding='utf-8')
    return path


def write_report(report: MetricsReport, output_dir: Path, name: str = 'metrics',
                 extra: Optional[Mapping[str, Any]] = None, confusion_csv: bool = True) -> List[Path]:
    """Write <name>.json, <name>.txt, the confusion CSV and heatmap; returns the paths written"""
    output_dir = Path(output_dir)
    paths = [
        write_text(output_dir / f"{name}.json", report_to_json(report, extra)),
        write_text(output_dir / f"{name}.txt",
                   metrics_table({name: report}) + '\n\n' + per_class_table(report)),
        write_text(output_dir / f"{name}_confusion.plotly.json", confusion_figure(report)),
    ]
    if confusion_csv:
        paths.append(write_confusion_csv(report, output_dir / f"{name}_confusion.csv"))
    logger.info(f"Wrote {name} report to {output_dir}")
    return paths


def write_ablation(rows: Sequence[Any], output_dir: Path, name: str = 'ablation') -> List[Path]:
    output_dir = Path(output_dir)
    paths = [
        write_text(output_dir / f"{name}.json", to_json([row.to_dict() for row in rows])),
        write_text(output_dir / f"{name}.txt", ablation_table(rows)),
        write_text(output_dir / f"{name}.plotly.json", ablation_figure(rows)),
    ]
    logger.info(f"Wrote ablation table with {len(rows)} rows to {output_dir}")
    return paths


def history_to_json(history: Dict[str, Any]) -> str:
    return to_json(history)
