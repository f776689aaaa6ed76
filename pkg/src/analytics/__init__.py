from .matching import ScoredBox, GtBox, MatchResult, match_detections, group_by_scene
from .metrics import (EvalReport, OwodEvaluator, average_precision, class_ap, mean_ap, u_recall, a_ose,
                      wilderness_impact)
from .report import write_report, load_report, render_markdown, plot_loss_curves, summary_table
