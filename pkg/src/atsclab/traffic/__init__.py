from .scenario import (
    FlowGroup,
    GridParams,
    Link,
    Node,
    PhaseTable,
    RoadNetwork,
    Scenario,
    ScenarioError,
    build_grid_scenario,
    load_scenario,
    scenario_from_doc,
)
from .simulator import (
    METRICS_CSV_HEADER,
    InvalidActionError,
    MetricsSnapshot,
    Observation,
    SimConfigError,
    SimParams,
    TrafficSim,
    metrics_csv_row,
)
