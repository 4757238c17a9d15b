"""
Console tables for stats, metric reports and trial comparisons.
Tables go to stdout; logs stay on stderr.
"""

from typing import Mapping, Optional

from rich.console import Console
from rich.table import Table

_console = Console()


def stats_table(display: Mapping[str, object], title: str = "Dataset statistics") -> Table:
    table = Table(title=title)
    for column in ("users", "items", "reviews", "avg", "density_percent"):
        table.add_column("density (%)" if column == "density_percent" else column, justify="right")
    table.add_row(*(f"{display[c]}" for c in ("users", "items", "reviews", "avg")),
                  f"{display['density_percent']:.4f}")
    return table


def report_table(record: Mapping[str, object], title: str = "Evaluation") -> Table:
    """H@k / N@k layout: hit rates first, then NDCG"""
    names = [k for k in record if k.startswith("HR@")] + [k for k in record if k.startswith("NDCG@")]
    names.sort(key=lambda n: (not n.startswith("HR@"), int(n.split("@")[1])))
    table = Table(title=title)
    for name in names:
        table.add_column(name.replace("HR@", "H@").replace("NDCG@", "N@"), justify="right")
    table.add_row(*(f"{float(record[n]):.4f}" for n in names))
    return table


def trials_table(summary: Mapping[str, object], comparisons: Optional[Mapping[str, object]] = None,
                 title: str = "Trials") -> Table:
    table = Table(title=title)
    table.add_column("metric")
    table.add_column("mean", justify="right")
    table.add_column("std", justify="right")
    table.add_column("n", justify="right")
    if comparisons:
        table.add_column("t", justify="right")
        table.add_column("p", justify="right")
    for name, s in summary.items():
        row = [name, f"{s.mean:.4f}", f"{s.std:.4f}", str(s.n)]
        if comparisons:
            c = comparisons.get(name)
            row += [f"{c.t_statistic:.4f}", f"{c.p_value:.4g}"] if c is not None else ["-", "-"]
        table.add_row(*row)
    return table


def summary_table(values: Mapping[str, object], title: str) -> Table:
    table = Table(title=title)
    table.add_column("field")
    table.add_column("value", justify="right")
    for key, value in values.items():
        table.add_row(str(key), str(value))
    return table


def print_table(table: Table, console: Optional[Console] = None) -> None:
    (console or _console).print(table)
