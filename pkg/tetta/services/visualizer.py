import pandas as pd
import plotly.graph_objects as go
from plotly.subplots import make_subplots
from typing import Optional

from tetta.services.tta import LOSS_TERMS

_COLORS = {
    "total": "#34495e",
    "photo": "#2ecc71",
    "mask": "#e67e22",
    "sds": "#9b59b6",
    "reg": "#e74c3c",
    "lap": "#3498db",
}


class HistoryVisualizer:
    """
    Transforma el historial de la adaptación (DataFrame) en figuras Plotly
    para el reporte HTML.
    """

    @staticmethod
    def create_loss_curves(history: pd.DataFrame) -> go.Figure:
        """Curvas de pérdida por término, una columna por etapa (escala log)."""
        stages = [s for s in ("A", "B") if (history["stage"] == s).any()] or ["A"]
        fig = make_subplots(rows=1, cols=len(stages), subplot_titles=[f"Etapa {s}" for s in stages])
        for col, stage in enumerate(stages, start=1):
            rows = history[history["stage"] == stage]
            for term in ("total", *LOSS_TERMS):
                if term not in rows or rows[term].isna().all():
                    continue
                fig.add_trace(
                    go.Scatter(
                        x=rows["iteration"],
                        y=rows[term],
                        mode="lines",
                        name=f"{term} ({stage})",
                        line=dict(color=_COLORS.get(term)),
                    ),
                    row=1,
                    col=col,
                )
            fig.update_yaxes(type="log", row=1, col=col)
            fig.update_xaxes(title_text="Iteración", row=1, col=col)

        fig.update_layout(
            title="Pérdidas de la adaptación",
            margin=dict(t=60, b=0, l=0, r=0),
            height=400,
        )
        return fig

    @staticmethod
    def create_pose_chart(history: pd.DataFrame) -> Optional[go.Figure]:
        """Evolución de (θ, φ, r) de la cámara virtual."""
        if history.empty:
            return None
        fig = make_subplots(rows=3, cols=1, shared_xaxes=True, subplot_titles=["Elevación", "Azimut", "Radio"])
        step = pd.RangeIndex(len(history))
        for row, name in enumerate(("elevation", "azimuth", "radius"), start=1):
            fig.add_trace(go.Scatter(x=step, y=history[name], mode="lines", name=name), row=row, col=1)
        fig.update_layout(margin=dict(t=40, b=0, l=0, r=0), height=500, showlegend=False)
        return fig

    @staticmethod
    def create_chamfer_chart(history: pd.DataFrame) -> Optional[go.Figure]:
        tracked = history.dropna(subset=["chamfer"]) if "chamfer" in history else history.iloc[0:0]
        if tracked.empty:
            return None
        fig = go.Figure(go.Scatter(x=tracked["iteration"], y=tracked["chamfer"], mode="lines+markers",
                                   marker_color="#34495e"))
        fig.update_layout(
            title="Chamfer a la malla real",
            margin=dict(t=30, b=0, l=0, r=0),
            height=300,
            xaxis_title="Iteración (etapa B)",
        )
        return fig

    def report_html(self, history: pd.DataFrame) -> str:
        figures = [self.create_loss_curves(history), self.create_pose_chart(history), self.create_chamfer_chart(history)]
        parts = [
            fig.to_html(full_html=False, include_plotlyjs="cdn" if k == 0 else False)
            for k, fig in enumerate(f for f in figures if f is not None)
        ]
        return "<html><head><meta charset='utf-8'></head><body>\n" + "\n".join(parts) + "\n</body></html>\n"


# Instancia para exportar
visualizer = HistoryVisualizer()
