from enum import StrEnum


class Default(StrEnum):
    BLUE = "#005B96"
    ORANGE = "#F2A900"
    BLACK = "#333333"


class LossTerm(StrEnum):
    """One colour per logged loss column"""

    L_m = "#005B96"
    L_nm = "#7A9CC6"
    L_veik = "#F2A900"
    total = "#333333"


class Band(StrEnum):
    LOW = "#D9E2EF"
    MID = "#7A9CC6"
    HIGH = "#F2A900"
