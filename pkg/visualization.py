"""
Training and error-analysis charts using Plotly.

This module handles:
- Validation CER curves, one trace per voter
- Bar charts of the most common confusions
- Summaries of reference runs
- Writing standalone HTML files
"""

from typing import Sequence

import pandas as pd
import plotly.express as px
import plotly.graph_objects as go


class Visualizer:
    """
    Creates interactive charts for training runs and evaluations.

    Key responsibilities:
    - Plot validation CER against samples seen
    - Display confusion counts
    - Export charts as HTML
    """

    def training_history_figure(self, reports: Sequence) -> go.Figure:
        """Validation CER vs. samples seen, one line per voter and stage.

        Args:
            reports: TrainReport objects

        Returns:
            plotly.Figure: line chart"""
        rows = [
            {
                "samples_seen": samples,
                "val_cer": value,
                "run": f"{report.stage} voter {report.voter}",
            }
            for report in reports
            for samples, value in report.history
        ]
        df = pd.DataFrame(rows, columns=["samples_seen", "val_cer", "run"])
        fig = px.line(
            df,
            x="samples_seen",
            y="val_cer",
            color="run",
            markers=True,
            title="Validation CER",
        )
        fig.update_yaxes(tickformat=".1%")
        return fig

    def confusion_figure(self, report) -> go.Figure:
        """
        Bar chart of the top confusions of a ConfusionReport.

        Args:
            report: ConfusionReport

        Returns:
            plotly.Figure: bars labelled "gt → pred"
        """
        df = report.to_frame()
        df["pair"] = df["gt"].replace("", "∅") + " → " + df["pred"].replace("", "∅")
        fig = go.Figure(go.Bar(x=df["pair"], y=df["cnt"], text=df["perc"].map("{:.2f}%".format)))
        fig.update_layout(
            title=f"Most common confusions ({report.total_errors} errors, CER {report.cer:.2%})",
            xaxis_title="GT → prediction",
            yaxis_title="count",
        )
        return fig

    def reference_summary_figure(self, results: dict) -> go.Figure:
        """Grouped bars of the test CERs recorded by a reference run."""
        rows = []
        if "ensemble" in results:
            ensemble = results["ensemble"]
            rows += [("ensemble", "voted", ensemble["voted_cer"]), ("ensemble", "median voter", ensemble["median_voter_cer"])]
        if "two-stage" in results:
            two_stage = results["two-stage"]
            rows += [
                ("two-stage", "stage 1 (macro)", two_stage["stage1_macro_cer"]),
                ("two-stage", "stage 2 (macro)", two_stage["stage2_macro_cer"]),
            ]
        if "finetune" in results:
            rows += [
                ("finetune", "finetuned", results["finetune"]["finetuned_cer"]),
                ("finetune", "scratch", results["finetune"]["scratch_cer"]),
            ]
        for row in results.get("ablation", {}).get("rows", []):
            augment = "aug" if row["augmentations_per_sample"] else "no aug"
            rows.append(("ablation", f"{row['variants']}, {augment}", row["voted_cer"]))
        df = pd.DataFrame(rows, columns=["experiment", "setting", "cer"])
        fig = px.bar(df, x="setting", y="cer", color="experiment", title="Reference runs: test CER")
        fig.update_yaxes(tickformat=".1%")
        return fig

    @staticmethod
    def write_figure(fig: go.Figure, path: str) -> None:
        fig.write_html(path, include_plotlyjs="cdn", full_html=True)
