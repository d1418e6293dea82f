"""Response-adaptive randomization: urn and biased-coin allocation rules,
allocation targets, a delayed-response trial engine and Monte Carlo
evaluation."""
from .coins import DBCD, ERADE, SMLP, SmoothedERADE, ThompsonThallWathen
from .core import (CompleteRandomization, Design, EmptyUrnError, NumericalError, PlayTheWinner,
                   Simulation, TrialState, WarmStart, run_trial, simulate)
from .delay import DelayModel, observed_view
from .metrics import ReplicationSummary, reference_variance
from .models import ResponseModel
from .targets import TARGETS
from .urns import (DropTheLoser, GeneralizedDropTheLoser, ImmigratedUrn, RandomlyReinforcedUrn,
                   SEUDesign, UrnDesign, rpw, stationary_allocation, wei)

__version__ = "0.1.0"
