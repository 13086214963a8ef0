"""Coefficient tables of the published spruce, pine and birch age models.

Every entry is kept as the printed text: (variable, estimate, std. error, t value, p value)
per row, and the residual standard error on the log scale.
"""

PUBLISHED_MODELS = {
    "spruce": {
        6: {
            "sigma": "0.320",
            "rows": [
                ("Intercept", "2.146e+00", "3.486e-01", "6.157", "< 0.001"),
                ("h95_first", "2.696e-01", "3.522e-02", "7.654", "< 0.001"),
                ("h95_first2", "-9.697e-03", "1.762e-03", "-5.504", "< 0.001"),
                ("NDVI", "8.016e-01", "3.168e-01", "2.530", "0.012"),
                ("Lon", "5.196e-02", "1.890e-02", "2.750", "0.007"),
                ("diffT", "-2.707e-02", "1.230e-02", "-2.200", "0.029"),
            ],
        },
        8: {
            "sigma": "0.360",
            "rows": [
                ("Intercept", "-2.837e+00", "8.517e-01", "-3.331", "< 0.001"),
                ("h95_first", "2.476e-01", "2.247e-02", "11.021", "< 0.001"),
                ("h95_first2", "-6.564e-03", "9.370e-04", "-7.005", "< 0.001"),
                ("s2_8A", "-3.037e-04", "6.148e-05", "-4.940", "< 0.001"),
                ("s2_11", "1.739e-04", "7.440e-05", "2.337", "0.020"),
                ("DTM", "6.502e-04", "1.221e-04", "5.325", "< 0.001"),
                ("distC", "-1.661e-06", "3.834e-07", "-4.332", "< 0.001"),
                ("Lat", "9.540e-02", "1.388e-02", "6.876", "< 0.001"),
            ],
        },
        11: {
            "sigma": "0.321",
            "rows": [
                ("Intercept", "-2.648e+00", "6.578e-01", "-4.025", "< 0.001"),
                ("h95_first", "2.472e-01", "1.681e-02", "14.705", "< 0.001"),
                ("h95_first2", "-4.696e-03", "6.111e-04", "-7.684", "< 0.001"),
                ("cc2", "-3.213e-01", "1.037e-01", "-3.098", "0.02"),
                ("DTM", "-1.144e-06", "3.143e-07", "-3.639", "< 0.001"),
                ("distC", "7.602e-02", "1.035e-02", "7.346", "< 0.001"),
                ("Lat", "-2.828e-03", "1.004e-03", "-2.815", "< 0.001"),
                ("slope", "2.887e-02", "7.933e-03", "3.640", "0.005"),
                ("diffT", "-2.648e+00", "6.578e-01", "-4.025", "< 0.001"),
            ],
        },
        14: {
            "sigma": "0.262",
            "rows": [
                ("Intercept", "-2.634e+00", "5.356e-01", "-4.919", "< 0.001"),
                ("h95_first", "1.217e-01", "1.036e-02", "11.756", "< 0.001"),
                ("h95_first2", "-1.038e-03", "3.380e-04", "-3.072", "0.002"),
                ("NDVI", "1.761e+00", "3.186e-01", "5.527", "< 0.001"),
                ("s2_8A", "-3.176e-04", "4.804e-05", "-6.610", "< 0.001"),
                ("s2_11", "4.705e-04", "8.497e-05", "5.538", "< 0.001"),
                ("DTM", "3.775e-04", "9.413e-05", "4.011", "< 0.001"),
                ("distC", "-8.311e-07", "2.508e-07", "-3.314", "0.001"),
                ("Lat", "6.321e-02", "7.357e-03", "8.592", "< 0.001"),
                ("slope", "-2.277e-03", "8.371e-04", "-2.720", "0.007"),
                ("diffT", "2.171e-02", "5.892e-03", "3.684", "< 0.001"),
            ],
        },
        17: {
            "sigma": "0.215",
            "rows": [
                ("Intercept", "-3.354e-01", "4.639e-01", "-0.723", "0.470"),
                ("h95_first", "1.272e-01", "1.267e-02", "10.043", "< 0.001"),
                ("h95_first2", "-1.264e-03", "3.305e-04", "-3.825", "< 0.001"),
                ("cc10", "-2.310e-01", "7.248e-02", "-3.187", "0.002"),
                ("s2_8A", "-6.457e-05", "2.597e-05", "-2.487", "0.013"),
                ("DTM", "3.974e-04", "9.645e-05", "4.120", "< 0.001"),
                ("distC", "-7.431e-07", "2.340e-07", "-3.176", "0.002"),
                ("Lat", "4.548e-02", "7.701e-03", "5.906", "< 0.001"),
                ("diffT", "2.790e-02", "6.301e-03", "4.428", "< 0.001"),
            ],
        },
        20: {
            "sigma": "0.164",
            "rows": [
                ("Intercept", "7.83e-01", "5.22e-01", "1.499", "0.136"),
                ("h95_first", "1.15e-01", "1.03e-02", "11.105", "< 0.001"),
                ("h95_first2", "-1.34e-03", "3.00e-04", "-4.456", "< 0.001"),
                ("Lat", "2.36e-02", "8.66e-03", "2.721", "0.007"),
                ("slope", "-2.32e-03", "7.51e-04", "-3.082", "0.002"),
                ("diffT", "3.06e-02", "7.14e-03", "4.281", "< 0.001"),
            ],
        },
        23: {
            "sigma": "0.132",
            "rows": [
                ("Intercept", "2.02e+00", "9.24e-02", "21.823", "< 0.001"),
                ("h95_first", "1.65e-01", "1.44e-02", "11.419", "< 0.001"),
                ("h95_first2", "-2.74e-03", "3.59e-04", "-7.630", "< 0.001"),
                ("cc10", "-3.92e-01", "1.03e-01", "-3.789", "< 0.001"),
                ("diffT", "2.21e-02", "7.66e-03", "2.879", "0.005"),
            ],
        },
        26: {
            "sigma": "0.062",
            "rows": [
                ("Intercept", "3.27e+00", "2.14e-01", "15.302", "< 0.001"),
                ("h95_first", "4.79e-02", "3.62e-03", "13.239", "< 0.001"),
                ("cc5", "-4.66e-01", "1.98e-01", "-2.349", "0.057"),
            ],
        },
    },
    "pine": {
        6: {
            "sigma": "0.287",
            "rows": [
                ("Intercept", "3.332e+00", "1.525e-01", "21.846", "< 0.001"),
                ("h95_first", "2.316e-01", "2.886e-02", "8.025", "< 0.001"),
                ("h95_first2", "-8.468e-03", "1.417e-03", "-5.977", "< 0.001"),
                ("DTM", "2.801e-04", "7.232e-05", "3.873", "< 0.001"),
            ],
        },
        8: {
            "sigma": "0.287",
            "rows": [
                ("Intercept", "-1.139e+00", "4.983e-01", "-2.286", "0.023"),
                ("h95_first", "3.516e-01", "1.957e-02", "17.970", "< 0.001"),
                ("h95_first2", "-1.034e-02", "8.031e-04", "-12.870", "< 0.001"),
                ("cc10", "3.214e-01", "9.059e-02", "3.548", "< 0.001"),
                ("cc2", "-5.827e-01", "9.461e-02", "-6.159", "< 0.001"),
                ("NDVI", "-4.305e-01", "1.323e-01", "-3.255", "0.001"),
                ("DTM", "1.731e-04", "7.047e-05", "2.456", "0.014"),
                ("distC", "-5.780e-07", "2.429e-07", "-2.379", "0.018"),
                ("Lat", "5.903e-02", "7.780e-03", "7.588", "< 0.001"),
                ("diffT", "1.332e-02", "5.583e-03", "2.387", "0.017"),
            ],
        },
        11: {
            "sigma": "0.270",
            "rows": [
                ("Intercept", "-2.296e-01", "5.697e-01", "-0.403", "0.687"),
                ("h95_first", "1.566e-01", "2.393e-02", "6.545", "< 0.001"),
                ("h95_first2", "-2.144e-03", "7.813e-04", "-2.744", "0.006"),
                ("cc10", "3.698e-01", "9.589e-02", "3.857", "< 0.001"),
                ("cc2", "-6.925e-01", "9.942e-02", "-6.966", "< 0.001"),
                ("s2_11", "2.182e-04", "5.943e-05", "3.671", "< 0.001"),
                ("DTM", "2.202e-04", "8.549e-05", "2.575", "0.010"),
                ("distC", "-1.298e-06", "2.751e-07", "-4.719", "< 0.001"),
                ("Lat", "4.614e-02", "9.326e-03", "4.947", "< 0.001"),
                ("slope", "1.949e-03", "7.736e-04", "2.519", "0.012"),
                ("diffT", "1.492e-02", "6.189e-03", "2.411", "0.016"),
            ],
        },
        14: {
            "sigma": "0.230",
            "rows": [
                ("Intercept", "-3.026e+00", "1.090e+00", "-2.776", "0.006"),
                ("h95_first", "1.304e-01", "1.609e-02", "8.105", "< 0.001"),
                ("h95_first2", "-9.890e-04", "5.068e-04", "-1.951", "0.052"),
                ("cc2", "-2.876e-01", "1.051e-01", "-2.737", "0.007"),
                ("NDVI", "1.561e+00", "4.365e-01", "3.577", "< 0.001"),
                ("s2_8A", "-2.633e-04", "8.332e-05", "-3.161", "0.002"),
                ("s2_11", "6.118e-04", "1.413e-04", "4.329", "< 0.001"),
                ("distC", "-1.056e-06", "3.070e-07", "-3.439", "0.001"),
                ("Lat", "7.074e-02", "1.635e-02", "4.328", "< 0.001"),
                ("diffT", "2.126e-02", "8.076e-03", "2.632", "0.009"),
            ],
        },
        17: {
            "sigma": "0.208",
            "rows": [
                ("Intercept", "-4.554e+00", "1.869e+00", "-2.437", "0.017"),
                ("h95_first", "1.242e-01", "3.267e-02", "3.803", "< 0.001"),
                ("h95_first2", "-2.344e-03", "9.885e-04", "-2.372", "0.020"),
                ("cc10", "2.865e-01", "1.414e-01", "2.026", "0.046"),
                ("NDVI", "1.561e+00", "6.292e-01", "2.481", "0.015"),
                ("s2_8A", "-2.120e-04", "1.036e-04", "-2.046", "0.044"),
                ("s2_11", "4.390e-04", "1.743e-04", "2.518", "0.014"),
                ("Lat", "9.259e-02", "2.656e-02", "3.487", "0.001"),
                ("diffT", "3.027e-02", "1.040e-02", "2.911", "0.005"),
            ],
        },
        20: {
            "sigma": "0.163",
            "rows": [
                ("Intercept", "-2.037e+00", "2.176e+00", "-0.936", "0.361"),
                ("h95_first", "7.050e-02", "7.744e-03", "9.104", "< 0.001"),
                ("cc2", "-4.554e-01", "1.878e-01", "-2.425", "0.025"),
                ("Lon", "-1.070e-01", "2.583e-02", "-4.142", "0.001"),
                ("Lat", "1.055e-01", "3.637e-02", "2.901", "0.009"),
                ("slope", "-8.509e-03", "3.342e-03", "-2.546", "0.020"),
            ],
        },
        23: {
            "sigma": "0.187",
            "rows": [
                ("Intercept", "2.865e+00", "2.552e-01", "11.224", "0.008"),
                ("h95_first", "5.231e-02", "1.294e-02", "4.042", "0.056"),
            ],
        },
    },
    "birch": {
        6: {
            "sigma": "0.378",
            "rows": [
                ("Intercept", "-1.257e+00", "1.903e+00", "-0.660", "0.511"),
                ("h95_first", "9.995e-02", "1.700e-02", "5.879", "< 0.001"),
                ("DTM", "6.262e-04", "1.817e-04", "3.447", "0.001"),
                ("Lat", "7.417e-02", "3.105e-02", "2.389", "0.019"),
            ],
        },
        8: {
            "sigma": "0.280",
            "rows": [
                ("Intercept", "-2.538E-01", "6.402E-01", "-0.396", "0.692"),
                ("h95_first", "1.819E-01", "3.669E-02", "4.958", "< 0.001"),
                ("h95_first2", "-3.691E-03", "1.651E-03", "-2.236", "0.026"),
                ("cc2", "-6.913E-01", "1.098E-01", "-6.295", "< 0.001"),
                ("s2_8A", "-8.220E-05", "2.570E-05", "-3.199", "0.002"),
                ("DTM", "3.849E-04", "1.117E-04", "3.445", "0.001"),
                ("distC", "-1.223E-06", "4.300E-07", "-2.844", "0.005"),
                ("Lat", "6.285E-02", "1.031E-02", "6.095", "< 0.001"),
            ],
        },
        11: {
            "sigma": "0.353",
            "rows": [
                ("Intercept", "-6.228e-01", "8.749e-01", "-0.712", "0.477"),
                ("h95_first", "2.850e-01", "3.334e-02", "8.550", "< 0.001"),
                ("h95_first2", "-6.689e-03", "1.179e-03", "-5.673", "< 0.001"),
                ("cc2", "-5.520e-01", "1.497e-01", "-3.686", "< 0.001"),
                ("DTM", "3.754e-04", "1.540e-04", "2.437", "0.016"),
                ("distC", "-1.905e-06", "5.907e-07", "-3.224", "0.001"),
                ("Lat", "4.548e-02", "1.365e-02", "3.333", "0.001"),
            ],
        },
        14: {
            "sigma": "0.302",
            "rows": [
                ("Intercept", "-9.998e-01", "9.065e-01", "-1.103", "0.272"),
                ("h95_first", "2.500e-01", "2.893e-02", "8.641", "< 0.001"),
                ("h95_first2", "-5.157e-03", "9.403e-04", "-5.484", "< 0.001"),
                ("cc2", "-3.962e-01", "1.636e-01", "-2.421", "0.017"),
                ("distC", "-2.029e-06", "5.904e-07", "-3.436", "0.001"),
                ("Lat", "4.953e-02", "1.443e-02", "3.433", "0.001"),
            ],
        },
        17: {
            "sigma": "0.270",
            "rows": [
                ("Intercept", "-1.340E+00", "1.154E+00", "-1.161", "0.249"),
                ("h95_first", "5.467E-02", "9.514E-03", "5.746", "0.039"),
                ("cc10", "3.418E-01", "1.436E-01", "2.380", "0.020"),
                ("s2_8A", "-1.323E-04", "4.262E-05", "-3.104", "0.003"),
                ("DTM", "-4.444E-04", "2.214E-04", "-2.007", "0.048"),
                ("Lon", "-9.251E-02", "1.899E-02", "-4.872", "< 0.001"),
                ("Lat", "9.168E-02", "2.011E-02", "4.559", "< 0.001"),
            ],
        },
        20: {
            "sigma": "0.362",
            "rows": [
                ("Intercept", "1.646e+00", "3.983e-01", "4.133", "< 0.001"),
                ("h95_first", "2.305e-01", "3.451e-02", "6.678", "< 0.001"),
                ("h95_first2", "-4.256e-03", "1.121e-03", "-3.796", "< 0.001"),
                ("Lon", "-7.624e-02", "3.573e-02", "-2.133", "0.038"),
                ("diffT", "7.409e-02", "3.402e-02", "2.178", "0.034"),
            ],
        },
        23: {
            "sigma": "0.159",
            "rows": [
                ("Intercept", "8.081e+00", "1.760e+00", "4.591", "0.004"),
                ("h95_first", "1.022e-01", "1.609e-02", "6.352", "0.001"),
                ("NDVI", "-7.766e+00", "2.091e+00", "-3.713", "0.010"),
                ("s2_8A", "6.981e-04", "2.478e-04", "2.818", "0.030"),
                ("s2_11", "-1.603e-03", "5.395e-04", "-2.970", "0.025"),
                ("DTM", "2.346e-03", "7.950e-04", "2.951", "0.026"),
            ],
        },
    },
}
