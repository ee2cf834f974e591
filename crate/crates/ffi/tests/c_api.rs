use std::ffi::{c_char, CString};
use std::ptr;
use tubempc_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0u8; 512];
    let n = unsafe { tubempc_last_error_message(buf.as_mut_ptr().cast::<c_char>(), buf.len()) };
    buf.truncate(n.min(511));
    String::from_utf8(buf).unwrap()
}

fn new_design(case: TubempcCase) -> *mut TubempcDesign {
    let mut d = ptr::null_mut();
    assert_eq!(unsafe { tubempc_design_new(case, &mut d) }, TubempcStatus::Ok, "{}", last_error());
    assert!(!d.is_null());
    d
}

#[test]
fn controller_steps_keep_plant_admissible() {
    let d = new_design(TubempcCase::Case1);
    let (mut n, mut m) = (0, 0);
    unsafe {
        assert_eq!(tubempc_design_dims(d, &mut n, &mut m), TubempcStatus::Ok);
        assert_eq!((n, m), (2, 1));
        let mut c = ptr::null_mut();
        assert_eq!(tubempc_controller_new(d, TubempcControllerKind::ParentChild, &mut c), TubempcStatus::Ok);
        tubempc_design_free(d);
        // A fresh design for the plant, to check the controller owns its data.
        let d = new_design(TubempcCase::Case1);
        let mut x = [2700.0, 0.0];
        let mut u = [0.0];
        let w = [0.0, 0.0];
        for _ in 0..20 {
            assert_eq!(tubempc_controller_step(c, x.as_ptr(), 2, u.as_mut_ptr(), 1), TubempcStatus::Ok, "{}", last_error());
            let mut next = [0.0; 2];
            assert_eq!(tubempc_plant_step(d, x.as_ptr(), u.as_ptr(), w.as_ptr(), next.as_mut_ptr()), TubempcStatus::Ok);
            x = next;
        }
        assert!(x[0] < 2700.0);
        assert_eq!(tubempc_controller_reset(c), TubempcStatus::Ok);
        tubempc_controller_free(c);
        tubempc_design_free(d);
    }
}

#[test]
fn run_summary_matches_library() {
    let d = new_design(TubempcCase::Case1);
    let mut s = TubempcSummary { final_cost: 0.0, switch_step: 0, infeasible_step: 0, mean_t_child_us: 0.0, mean_t_parent_us: 0.0, steps_run: 0 };
    unsafe {
        assert_eq!(tubempc_run(d, TubempcControllerKind::ParentChild, 60, 3, &mut s), TubempcStatus::Ok);
        tubempc_design_free(d);
    }
    let b = tubempc::design::design_case1(&Default::default()).unwrap();
    let log = tubempc::sim::run_bundle(&b, tubempc::design::ControllerKind::Pc, 60, 3, tubempc::sim::DisturbanceMode::UniformBox).unwrap();
    assert_eq!(s.steps_run, 60);
    assert_eq!(s.infeasible_step, -1);
    assert_eq!(s.final_cost, log.summary().final_cost);
    assert_eq!(s.switch_step, log.switch_step().map_or(-1, |k| k as i64));
}

#[test]
fn json_round_trip() {
    let d = new_design(TubempcCase::Case2);
    unsafe {
        let mut len = 0;
        assert_eq!(tubempc_design_to_json(d, ptr::null_mut(), 0, &mut len), TubempcStatus::BufferTooSmall);
        let mut buf = vec![0u8; len + 1];
        assert_eq!(tubempc_design_to_json(d, buf.as_mut_ptr().cast(), buf.len(), &mut len), TubempcStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(tubempc_design_from_json(buf.as_ptr().cast(), &mut back), TubempcStatus::Ok, "{}", last_error());
        let mut len2 = 0;
        tubempc_design_to_json(back, ptr::null_mut(), 0, &mut len2);
        assert_eq!(len, len2);
        tubempc_design_free(back);
        tubempc_design_free(d);
    }
}

#[test]
fn bad_arguments_report_errors() {
    unsafe {
        assert_eq!(tubempc_design_new(TubempcCase::Case1, ptr::null_mut()), TubempcStatus::NullArgument);
        assert!(last_error().contains("null"));
        let junk = CString::new("{not json").unwrap();
        let mut d = ptr::null_mut();
        assert_eq!(tubempc_design_from_json(junk.as_ptr(), &mut d), TubempcStatus::InvalidArgument);
        assert!(d.is_null());

        let d = new_design(TubempcCase::Case2);
        let mut c = ptr::null_mut();
        assert_eq!(tubempc_controller_new(d, TubempcControllerKind::Deterministic, &mut c), TubempcStatus::InvalidArgument);
        assert_eq!(tubempc_controller_new(d, TubempcControllerKind::ParentChild, &mut c), TubempcStatus::Ok);
        let x = [0.5, 0.5];
        let mut u = [0.0; 2];
        assert_eq!(tubempc_controller_step(c, x.as_ptr(), 2, u.as_mut_ptr(), 2), TubempcStatus::InvalidArgument);
        let nan = [f64::NAN, 0.0];
        assert_eq!(tubempc_controller_step(c, nan.as_ptr(), 2, u.as_mut_ptr(), 1), TubempcStatus::InvalidArgument);
        tubempc_controller_free(c);
        tubempc_design_free(d);
        tubempc_design_free(ptr::null_mut());
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/tubempc.h")).unwrap();
    let src = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/src/lib.rs")).unwrap();
    let exports: Vec<&str> = src.lines().filter_map(|l| l.split("extern \"C\" fn ").nth(1)).map(|r| r.split('(').next().unwrap()).collect();
    assert!(exports.len() >= 12);
    for f in exports {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
    for t in ["TUBEMPC_STATUS_OK = 0", "typedef struct TubempcDesign TubempcDesign", "typedef struct TubempcSummary"] {
        assert!(header.contains(t), "{t}");
    }
}
