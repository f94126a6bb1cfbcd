"""Sensitivity analysis for false discovery proportions in matched observational studies."""
__version__ = "0.1.0"

from .design import (MatchedDesign, OutcomeMatrix, ScoreMatrix, build_scores,  # noqa: E402
                     huber_m_scores, load_design_csv, mh_scores, sum_statistic,
                     write_design_csv)
from .sensitivity import (AssignmentProbabilities, GammaBound, moments,  # noqa: E402
                          single_sensitivity_value, worst_case_pvalues)
from .minimax import MinimaxResult, MinimaxSolver, ZetaProblem, minimax_zeta, zeta  # noqa: E402
from .closed import (ClosedTestConfig, ClosedTestSession, FdpReport, enumerative_oracle_v,  # noqa: E402
                     gsv, naive_v, screen, subset_search, v_known_rho, v_star)
