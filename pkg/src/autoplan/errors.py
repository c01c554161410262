"""Exception hierarchy shared by every planning stage."""


class PlanError(Exception):
    """Base class for all planner errors."""


class InputError(PlanError):
    """A user-supplied document is malformed or inconsistent."""


class SchemaError(InputError):
    pass


class CycleError(InputError):
    pass


class DanglingRefError(InputError):
    pass


class ShapeMismatchError(InputError):
    pass


class UnsupportedKindError(InputError):
    pass


class TopologyError(InputError):
    pass


class ShapeError(InputError):
    """Requested mesh shape does not match the device count."""


class AxisError(InputError):
    pass


class SpecError(InputError):
    """A sharding spec is malformed or invalid for a tensor/mesh."""


class RankMismatchError(SpecError):
    pass


class SeedError(InputError):
    pass


class HeterogeneityError(PlanError):
    """Devices on one mesh axis do not share link characteristics.

    Carried as a warning on the mesh rather than raised.
    """


class InfeasibleError(PlanError):
    """No selection satisfies the memory budget."""


class MissingStrategyError(PlanError):
    pass


class MissingPathError(PlanError):
    pass


class NonDagError(PlanError):
    pass
