import datetime

from airflow import DAG
from bk_thermo_provider.operators.thermo import (
    BKThermoConformalOperator,
    BKThermoDensityOperator,
    BKThermoDimensionOperator,
    BKThermoGibbsOperator,
    BKThermoPressureCurveOperator,
    BKThermoPressureOperator,
    BKThermoSampleJuliaOperator,
    BKThermoVerifyOperator,
)
from bk_thermo_provider.sensors.artifact import ThermoArtifactSensor

OUTPUT_DIR = "/tmp/bk_thermo/{{ ds_nodash }}"

with DAG(
    dag_id="bk_thermo_tangent_pipeline",
    description="Example DAG running the full thermodynamic formalism pipeline for lambda tan z",
    catchup=False,
    start_date=datetime.datetime(2024, 1, 1),
    tags=["BK_THERMO"],
) as dag:
    common = {
        "bk_thermo_conn_id": "bk_thermo_default",
        "config": {"model": {"lam": 0.5}, "potential": {"tau": 1.5, "t": 3.0}},
        "output_dir": OUTPUT_DIR,
    }

    sample = BKThermoSampleJuliaOperator(task_id="sample_julia", **common)
    pressure = BKThermoPressureOperator(task_id="pressure", **common)
    curve = BKThermoPressureCurveOperator(task_id="pressure_curve", **common)
    density = BKThermoDensityOperator(task_id="density", **common)
    conformal = BKThermoConformalOperator(task_id="conformal", **common)
    conformal_ready = ThermoArtifactSensor(
        task_id="wait_for_conformal",
        stage="conformal",
        output_dir=OUTPUT_DIR,
        poke_interval=30,
        timeout=60 * 60,
    )
    gibbs = BKThermoGibbsOperator(task_id="gibbs", **common)
    verify = BKThermoVerifyOperator(task_id="verify", overrides=["verify.n_max=8"], **common)
    dimension = BKThermoDimensionOperator(task_id="dimension", **common)

    sample >> pressure >> [curve, density, conformal, dimension]
    conformal >> conformal_ready
    [density, conformal_ready] >> gibbs
    sample >> verify
