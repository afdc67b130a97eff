use std::ffi::{CStr, CString};
use std::ptr;

use tnbma_ffi::*;

const MODEL: &str = "group.control.members=1
group.control.weight=0.4
group.control.alpha=0.5
group.control.beta=1.1
group.perturbed.members=2
group.perturbed.weight=0.3
group.perturbed.alpha=0.2
group.perturbed.beta=0.9
sigma=1.3
";

fn load(text: &str) -> *mut TnbmaModel {
    let c = CString::new(text).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { tnbma_model_from_string(c.as_ptr(), &mut m) }, TnbmaStatus::Ok);
    assert!(!m.is_null());
    m
}

fn last_error() -> String {
    let p = tnbma_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn predictive_calls_match_library() {
    let m = load(MODEL);
    let members = [2.0, 1.5, 3.0];
    let reference = tnbma::BmaModel::from_kv_str(MODEL).unwrap();
    let pred = reference.predictive_from_members(&members).unwrap();
    let (mut pdf, mut cdf, mut q, mut crps) = (0.0, 0.0, 0.0, 0.0);
    unsafe {
        assert_eq!(tnbma_predictive_pdf(m, members.as_ptr(), 3, 2.5, &mut pdf), TnbmaStatus::Ok);
        assert_eq!(tnbma_predictive_cdf(m, members.as_ptr(), 3, 2.5, &mut cdf), TnbmaStatus::Ok);
        assert_eq!(tnbma_predictive_quantile(m, members.as_ptr(), 3, 0.25, &mut q), TnbmaStatus::Ok);
        assert_eq!(tnbma_predictive_crps(m, members.as_ptr(), 3, 2.5, &mut crps), TnbmaStatus::Ok);
    }
    assert_eq!(pdf, pred.pdf(2.5));
    assert_eq!(cdf, pred.cdf(2.5));
    assert_eq!(q, pred.quantile(0.25).unwrap());
    assert_eq!(crps, tnbma::scoring::crps_predictive(&pred, 2.5).unwrap());
    assert!(tnbma_last_error().is_null());
    unsafe { tnbma_model_free(m) };
}

#[test]
fn accessors_and_round_trip() {
    let m = load(MODEL);
    let (mut members, mut groups, mut sigma) = (0usize, 0usize, 0.0);
    let (mut w, mut a, mut b) = (0.0, 0.0, 0.0);
    unsafe {
        assert_eq!(tnbma_model_member_count(m, &mut members), TnbmaStatus::Ok);
        assert_eq!(tnbma_model_group_count(m, &mut groups), TnbmaStatus::Ok);
        assert_eq!(tnbma_model_sigma(m, &mut sigma), TnbmaStatus::Ok);
        assert_eq!(tnbma_model_group_params(m, 1, &mut w, &mut a, &mut b), TnbmaStatus::Ok);
        assert_eq!(
            tnbma_model_group_params(m, 2, &mut w, &mut a, &mut b),
            TnbmaStatus::InvalidArgument
        );
    }
    assert_eq!((members, groups, sigma), (3, 2, 1.3));
    assert_eq!((w, a, b), (0.3, 0.2, 0.9));

    let mut s = ptr::null_mut();
    assert_eq!(unsafe { tnbma_model_to_string(m, &mut s) }, TnbmaStatus::Ok);
    let text = unsafe { CStr::from_ptr(s) }.to_str().unwrap().to_string();
    unsafe { tnbma_string_free(s) };
    let again = load(&text);
    let (mut c1, mut c2) = (0.0, 0.0);
    let f = [1.0, 4.0, 0.5];
    unsafe {
        tnbma_predictive_cdf(m, f.as_ptr(), 3, 2.0, &mut c1);
        tnbma_predictive_cdf(again, f.as_ptr(), 3, 2.0, &mut c2);
        tnbma_model_free(m);
        tnbma_model_free(again);
    }
    assert_eq!(c1, c2);
}

#[test]
fn error_codes() {
    let bad = CString::new("sigma=oops\n").unwrap();
    let mut m = ptr::null_mut();
    let st = unsafe { tnbma_model_from_string(bad.as_ptr(), &mut m) };
    assert_ne!(st, TnbmaStatus::Ok);
    assert!(m.is_null());
    assert!(!last_error().is_empty());

    assert_eq!(
        unsafe { tnbma_model_from_string(ptr::null(), &mut m) },
        TnbmaStatus::NullPointer
    );

    let missing = CString::new("/nonexistent/model.txt").unwrap();
    assert_eq!(unsafe { tnbma_model_load(missing.as_ptr(), &mut m) }, TnbmaStatus::Io);

    let model = load(MODEL);
    let mut out = 0.0;
    let f = [1.0, 2.0, 3.0];
    unsafe {
        assert_eq!(
            tnbma_predictive_quantile(model, f.as_ptr(), 3, 1.5, &mut out),
            TnbmaStatus::InvalidArgument
        );
        assert!(last_error().contains("1.5"));
        assert_eq!(
            tnbma_predictive_cdf(model, ptr::null(), 3, 1.0, &mut out),
            TnbmaStatus::NullPointer
        );
        assert_eq!(
            tnbma_predictive_cdf(model, f.as_ptr(), 3, 1.0, ptr::null_mut()),
            TnbmaStatus::NullPointer
        );
        assert_eq!(
            tnbma_predictive_cdf(ptr::null(), f.as_ptr(), 3, 1.0, &mut out),
            TnbmaStatus::NullPointer
        );
        tnbma_model_free(model);
        tnbma_model_free(ptr::null_mut());
        tnbma_string_free(ptr::null_mut());
    }
}

#[test]
fn fit_from_arrays_matches_library() {
    let spec = tnbma::GroupSpec::two_group();
    let config = tnbma::dataio::SynthConfig {
        stations: 5,
        days: 40,
        ..tnbma::dataio::SynthConfig::new(spec.clone(), 3)
    };
    let archive = tnbma::dataio::generate_synthetic(&config).unwrap();
    let m = spec.total_members();
    let mut forecasts = Vec::new();
    let mut obs = Vec::new();
    for c in archive.cases() {
        forecasts.extend(c.member_values().unwrap());
        obs.push(c.observation.unwrap());
    }
    let n = obs.len();
    let groups = CString::new("two-group").unwrap();
    let mut handle = ptr::null_mut();
    let mut converged = false;
    let st = unsafe {
        tnbma_fit(
            groups.as_ptr(),
            TNBMA_VARIANT_FULL_ML,
            forecasts.as_ptr(),
            obs.as_ptr(),
            n,
            m,
            &mut handle,
            &mut converged,
        )
    };
    assert_eq!(st, TnbmaStatus::Ok);
    assert!(converged);

    let training = tnbma::estimation::TrainingSet::from_matrix(spec, forecasts.clone(), obs.clone()).unwrap();
    let want = tnbma::estimation::fit(&training, &tnbma::estimation::EmConfig::default()).unwrap();
    let mut sigma = 0.0;
    unsafe { tnbma_model_sigma(handle, &mut sigma) };
    assert_eq!(sigma, want.model.sigma());
    unsafe { tnbma_model_free(handle) };

    let mut h2 = ptr::null_mut();
    let st = unsafe {
        tnbma_fit(groups.as_ptr(), 9, forecasts.as_ptr(), obs.as_ptr(), n, m, &mut h2, ptr::null_mut())
    };
    assert_eq!(st, TnbmaStatus::InvalidArgument);
    assert!(last_error().contains("variant"));
    let st = unsafe {
        tnbma_fit(groups.as_ptr(), 0, forecasts.as_ptr(), obs.as_ptr(), n, 3, &mut h2, ptr::null_mut())
    };
    assert_eq!(st, TnbmaStatus::InvalidArgument);
    assert!(h2.is_null());
}
