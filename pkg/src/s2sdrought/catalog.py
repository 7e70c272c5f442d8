"""Variable roster and channel layout of the emulator's input/output stacks."""
from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import asdict, dataclass


class Role(str, enum.Enum):
    PROGNOSTIC = "prognostic"
    DYNAMIC_FORCING = "dynamic_forcing"
    CYCLIC_FORCING = "cyclic_forcing"
    STATIC = "static"
    DIAGNOSTIC = "diagnostic"


INPUT_ROLES = (Role.PROGNOSTIC, Role.DYNAMIC_FORCING, Role.CYCLIC_FORCING, Role.STATIC)
OUTPUT_ROLES = (Role.PROGNOSTIC, Role.DIAGNOSTIC)


@dataclass(frozen=True)
class VariableDef:
    name: str
    role: Role
    units: str
    level: str = "surface"
    nonneg: bool = False
    categorical: bool = False
    scalar: bool = False  # climate index broadcast as a constant channel
    long_name: str = ""


def _v(name, role, units, level="surface", **kw):
    return VariableDef(name, Role(role), units, level, **kw)


# Listing order follows the roster table: prognostic, dynamic, cyclic, static,
# diagnostic.  Upper-air fields are separate channels per pressure level.
VARIABLES = (
    _v("u500", "prognostic", "m s-1", "500mb", long_name="u wind component"),
    _v("u200", "prognostic", "m s-1", "200mb", long_name="u wind component"),
    _v("v500", "prognostic", "m s-1", "500mb", long_name="v wind component"),
    _v("v200", "prognostic", "m s-1", "200mb", long_name="v wind component"),
    _v("z500", "prognostic", "m2 s-2", "500mb", long_name="geopotential"),
    _v("z200", "prognostic", "m2 s-2", "200mb", long_name="geopotential"),
    _v("qtot500", "prognostic", "kg kg-1", "500mb", nonneg=True, long_name="total specific humidity"),
    _v("qtot200", "prognostic", "kg kg-1", "200mb", nonneg=True, long_name="total specific humidity"),
    _v("t2m", "prognostic", "K", long_name="temperature"),
    _v("d2m", "prognostic", "K", long_name="dewpoint temperature"),
    _v("precip", "prognostic", "mm day-1", nonneg=True, long_name="1-day precipitation accumulation"),
    _v("sp", "prognostic", "Pa", long_name="surface pressure"),
    _v("evap", "prognostic", "mm day-1", nonneg=True, long_name="evaporation (ET)"),
    _v("pevap", "prognostic", "mm day-1", nonneg=True, long_name="potential evaporation (PET)"),
    _v("enso", "dynamic_forcing", "1", scalar=True, long_name="ENSO index"),
    _v("iod", "dynamic_forcing", "1", scalar=True, long_name="IOD index"),
    _v("ssr", "dynamic_forcing", "W m-2", long_name="net surface shortwave radiation"),
    _v("wind10", "dynamic_forcing", "m s-1", long_name="surface wind speed"),
    _v("gust", "dynamic_forcing", "m s-1", long_name="surface wind gusts"),
    _v("ssr_clim", "cyclic_forcing", "W m-2", long_name="net surface shortwave radiation climatology"),
    _v("lsm", "static", "1", categorical=True, long_name="land-sea mask"),
    _v("tvh", "static", "1", categorical=True, long_name="high vegetation type"),
    _v("cvh", "static", "1", long_name="high vegetation cover"),
    _v("tvl", "static", "1", categorical=True, long_name="low vegetation type"),
    _v("cvl", "static", "1", long_name="low vegetation cover"),
    _v("precip30", "diagnostic", "mm", nonneg=True, long_name="30-day precipitation accumulation"),
    _v("ndvi", "diagnostic", "1", nonneg=True, long_name="NDVI"),
    _v("evi", "diagnostic", "1", nonneg=True, long_name="EVI"),
    _v("lai", "diagnostic", "m2 m-2", nonneg=True, long_name="leaf area index"),
    _v("fpar", "diagnostic", "1", nonneg=True, long_name="fPAR"),
    _v("sm1", "diagnostic", "m3 m-3", "soil1", nonneg=True, long_name="soil moisture 0-10 cm"),
    _v("sm2", "diagnostic", "m3 m-3", "soil2", nonneg=True, long_name="soil moisture 10-40 cm"),
    _v("sm3", "diagnostic", "m3 m-3", "soil3", nonneg=True, long_name="soil moisture 40-100 cm"),
    _v("sm4", "diagnostic", "m3 m-3", "soil4", nonneg=True, long_name="soil moisture 100-200 cm"),
)

# observed on an 8-day cadence and gap filled to daily
SPARSE_VARIABLES = ("ndvi", "evi", "lai", "fpar")


class VariableCatalog:
    """Ordered roster with input/output channel indices."""

    def __init__(self, variables=VARIABLES):
        self.variables = tuple(variables)
        self.by_name = {v.name: v for v in self.variables}
        if len(self.by_name) != len(self.variables):
            raise ValueError("duplicate variable names in catalog")
        self.inputs = tuple(v for r in INPUT_ROLES for v in self.variables if v.role is r)
        self.outputs = tuple(v for r in OUTPUT_ROLES for v in self.variables if v.role is r)
        self.input_index = {v.name: i for i, v in enumerate(self.inputs)}
        self.output_index = {v.name: i for i, v in enumerate(self.outputs)}

    def __getitem__(self, name) -> VariableDef:
        return self.by_name[name]

    def __iter__(self):
        return iter(self.variables)

    @property
    def n_inputs(self) -> int:
        return len(self.inputs)

    @property
    def n_outputs(self) -> int:
        return len(self.outputs)

    def names(self, role: Role | None = None):
        return [v.name for v in self.variables if role is None or v.role is Role(role)]

    @property
    def prognostic(self):
        return self.names(Role.PROGNOSTIC)

    @property
    def n_prognostic(self) -> int:
        return len(self.prognostic)

    def nonneg_output_channels(self):
        return [i for i, v in enumerate(self.outputs) if v.nonneg]

    def digest(self) -> str:
        """Stable hash of names, roles and order; stored in checkpoints."""
        payload = json.dumps([asdict(v) for v in self.variables], sort_keys=True, default=str)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


DEFAULT_CATALOG = VariableCatalog()
