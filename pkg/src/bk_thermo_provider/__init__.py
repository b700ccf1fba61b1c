def get_provider_info():
    return {
        "package-name": "airflow-bk-thermo-provider",
        "name": "Airflow Provider package for BK-class thermodynamic formalism",
        "description": "Runs transfer-operator, pressure, conformal and Gibbs measure pipelines for BK-class meromorphic maps",
        "versions": ["0.1.0"],
        "hook-class-names": ["bk_thermo_provider.hooks.thermo.BKThermoHook"],
    }
