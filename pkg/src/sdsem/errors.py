"""Exception types shared across the toolkit."""


class SdsemError(Exception):
    """Base class for all toolkit errors."""


class DimensionMismatch(SdsemError):
    """Operands have incompatible shapes."""


class NotPositiveDefinite(SdsemError):
    """A matrix required to be positive definite is not."""


class FactorizationFailure(SdsemError):
    """A Cholesky or related factorization could not be computed."""


class InnovationCovSingular(SdsemError):
    """The Kalman innovation covariance is singular."""


class NonFiniteSample(SdsemError):
    """Simulation produced non-finite values (explosive dynamics)."""


class BlockStructureViolation(SdsemError):
    """A matrix violates the required upper-block-triangular layout."""


class EmptyChain(SdsemError):
    """No retained posterior draws are available."""


class SingularObsCov(SdsemError):
    """Observation covariance is singular or non-positive."""


class ChainDiverged(SdsemError):
    """An MCMC chain produced non-finite state."""


class ZeroWithinVariance(SdsemError):
    """All chains are constant; the scale-reduction statistic is undefined."""


class EmptyCluster(SdsemError):
    """K-means produced an empty cluster after bounded retries."""


class NonFiniteForecast(SdsemError):
    """All predictive draws were excluded as explosive."""


class RankDeficientLoadings(SdsemError):
    """The exogenous loading matrix has deficient column rank."""


class AlignmentMismatch(SdsemError):
    """Two series or panels do not share the same index."""


class SchemaError(SdsemError):
    """An input file does not match the declared schema."""


class GapInTimeIndex(SdsemError):
    """A site is missing one or more periods."""


class UnknownSiteInAdjacency(SdsemError):
    """The adjacency input references a site absent from the panel."""


class NonPositiveValue(SdsemError):
    """A strictly positive input contains zero or negative entries."""
