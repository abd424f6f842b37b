//! Fixture comparisons shared by the oracle tests and the acceptance suite.
//! Fixtures come from independent implementations (plain Python, scipy,
//! numpy); see `fixtures/gen_oracles.py`.

#![allow(dead_code)]

use kvguard::faultlab::{lcs_len, ocr, rouge_l_f1, tcr, tdr};
use kvguard::stats::{kruskal_wallis, ols_fit, spearman};
use serde_json::Value;

pub const METRIC_TOL: f64 = 1e-9;
pub const P_TOL: f64 = 1e-3;
pub const MIN_CASES: usize = 20;

pub const FAMILIES: [&str; 7] = [
    "tcr",
    "tdr",
    "ocr",
    "rouge_l",
    "spearman",
    "kruskal_wallis",
    "ols",
];

fn cases(name: &str) -> Vec<Value> {
    let all: Value = serde_json::from_str(include_str!("../fixtures/oracles.json")).unwrap();
    all[name].as_array().unwrap().clone()
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect()
}

fn tokens(v: &Value) -> Vec<u32> {
    v.as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_u64().unwrap() as u32)
        .collect()
}

fn seqs(v: &Value) -> Vec<Vec<u32>> {
    v.as_array().unwrap().iter().map(tokens).collect()
}

fn close(got: f64, want: &Value, tol: f64, what: &str) -> Result<(), String> {
    let want = want.as_f64().unwrap();
    if (got - want).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{what}: got {got}, want {want}"))
    }
}

fn check_case(family: &str, c: &Value) -> Result<(), String> {
    match family {
        "tcr" => close(
            tcr(&seqs(&c["baselines"]), &seqs(&c["outputs"])).unwrap(),
            &c["expected"],
            METRIC_TOL,
            "tcr",
        ),
        "tdr" => close(
            tdr(&tokens(&c["y"]), &tokens(&c["y_hat"])),
            &c["expected"],
            METRIC_TOL,
            "tdr",
        ),
        "ocr" => close(
            ocr(&floats(&c["tcrs"])).unwrap(),
            &c["expected"],
            METRIC_TOL,
            "ocr",
        ),
        "rouge_l" => {
            let (r, h) = (tokens(&c["reference"]), tokens(&c["hypothesis"]));
            close(lcs_len(&r, &h) as f64, &c["lcs"], 0.0, "lcs")?;
            close(rouge_l_f1(&r, &h), &c["expected"], METRIC_TOL, "rouge-l")
        }
        "spearman" => {
            let r = spearman(&floats(&c["x"]), &floats(&c["y"])).map_err(|e| e.to_string())?;
            close(r.statistic, &c["rho"], METRIC_TOL, "rho")?;
            close(r.p_value, &c["p"], P_TOL, "spearman p")
        }
        "kruskal_wallis" => {
            let groups: Vec<Vec<f64>> =
                c["groups"].as_array().unwrap().iter().map(floats).collect();
            let r = kruskal_wallis(&groups).map_err(|e| e.to_string())?;
            close(r.statistic, &c["h"], METRIC_TOL, "H")?;
            close(r.p_value, &c["p"], P_TOL, "kruskal-wallis p")
        }
        "ols" => {
            let f = ols_fit(&floats(&c["x"]), &floats(&c["y"])).map_err(|e| e.to_string())?;
            close(f.slope, &c["slope"], METRIC_TOL, "slope")?;
            close(f.intercept, &c["intercept"], METRIC_TOL, "intercept")?;
            close(f.r_squared, &c["r_squared"], METRIC_TOL, "r2")
        }
        _ => panic!("unknown family {family}"),
    }
}

/// Number of cases checked, or the first mismatch.
pub fn check_family(family: &str) -> Result<usize, String> {
    let cs = cases(family);
    if cs.len() < MIN_CASES {
        return Err(format!("{family}: only {} cases", cs.len()));
    }
    for (i, c) in cs.iter().enumerate() {
        check_case(family, c).map_err(|e| format!("{family} case {i}: {e}"))?;
    }
    Ok(cs.len())
}
