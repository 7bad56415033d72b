use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use boltzgen::flow::{Architecture, Checkpoint, FlowModel, SubnetConvention};
use boltzgen_ffi::*;

const DOUBLE_WELL: &str = "kind = \"double_well\"\ndomain = { lower = [-3.0, -3.0], upper = [3.0, 3.0] }\n";

fn last_error() -> String {
    let p = bg_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn checkpoint(dir: &Path) -> (PathBuf, FlowModel) {
    let mut arch = Architecture::new(2, 4, 8, SubnetConvention::PartitionInput);
    arch.output_init_scale = 1.0;
    let model = FlowModel::new(arch, 3).unwrap();
    let path = dir.join("flow.json");
    Checkpoint::new(model.clone()).write(&path).unwrap();
    (path, model)
}

#[test]
fn flow_handle_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let (path, model) = checkpoint(dir.path());
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut flow = ptr::null_mut();
    unsafe {
        assert_eq!(bg_flow_load(cpath.as_ptr(), &mut flow), BgStatus::Ok);
        assert_eq!(bg_flow_dim(flow), 2);

        let x = [0.3, -0.2, 1.1, 0.4];
        let mut lp = [0.0; 2];
        assert_eq!(bg_flow_log_prob(flow, x.as_ptr(), 2, lp.as_mut_ptr()), BgStatus::Ok);
        assert_eq!(lp[0], model.log_prob(&x[..2]).unwrap());
        assert_eq!(lp[1], model.log_prob(&x[2..]).unwrap());

        let (mut z, mut ld) = ([0.0; 4], [0.0; 2]);
        assert_eq!(bg_flow_inverse(flow, x.as_ptr(), 2, z.as_mut_ptr(), ld.as_mut_ptr()), BgStatus::Ok);
        let (z0, l0) = model.inverse(&x[..2]).unwrap();
        assert_eq!((&z[..2], ld[0]), (&z0[..], l0));
        assert_eq!(bg_flow_inverse(flow, x.as_ptr(), 2, z.as_mut_ptr(), ptr::null_mut()), BgStatus::Ok);

        let mut s = vec![0.0; 20];
        assert_eq!(bg_flow_sample(flow, 10, 7, s.as_mut_ptr()), BgStatus::Ok);
        let expect = model.sample(10, 7).unwrap();
        assert_eq!(&s[..2], expect.point(0));
        bg_flow_free(flow);
    }
}

#[test]
fn potential_handle_evaluates() {
    let text = CString::new(DOUBLE_WELL).unwrap();
    let mut pot = ptr::null_mut();
    unsafe {
        assert_eq!(bg_potential_from_toml(text.as_ptr(), &mut pot), BgStatus::Ok);
        assert_eq!(bg_potential_dim(pot), 2);
        let x = [1.0, 0.0];
        let (mut e, mut g) = (f64::NAN, [f64::NAN; 2]);
        assert_eq!(bg_potential_energy(pot, x.as_ptr(), &mut e), BgStatus::Ok);
        assert_eq!(bg_potential_gradient(pot, x.as_ptr(), g.as_mut_ptr()), BgStatus::Ok);
        assert!(e.is_finite());
        assert!(g[0].abs() < 1e-12 && g[1].abs() < 1e-12, "{g:?}");
        bg_potential_free(pot);
    }
}

#[test]
fn errors_set_codes_and_messages() {
    let mut flow = ptr::null_mut();
    let mut pot = ptr::null_mut();
    let missing = CString::new("/nonexistent/flow.json").unwrap();
    let bad = CString::new("kind = \"quartic\"").unwrap();
    let mut out = 0.0;
    unsafe {
        assert_eq!(bg_flow_load(ptr::null(), &mut flow), BgStatus::NullPointer);
        assert!(last_error().contains("path"));
        assert_eq!(bg_flow_load(missing.as_ptr(), &mut flow), BgStatus::Io);
        assert!(flow.is_null());
        assert_eq!(bg_potential_from_toml(bad.as_ptr(), &mut pot), BgStatus::Parse);
        assert_eq!(bg_flow_log_prob(ptr::null(), [0.0; 2].as_ptr(), 1, &mut out), BgStatus::NullPointer);
        assert_eq!(bg_flow_dim(ptr::null()), 0);
        assert_eq!(bg_w2_exact([0.0].as_ptr(), 1, [0.0].as_ptr(), 1, 0, 1, 0, &mut out), BgStatus::InvalidArgument);
        bg_flow_free(ptr::null_mut());
        bg_potential_free(ptr::null_mut());
    }
}

#[test]
fn w2_of_translated_points() {
    let a: Vec<f64> = (0..50).flat_map(|i| [i as f64 * 0.1, (i * 7 % 13) as f64]).collect();
    let b: Vec<f64> = a.chunks(2).flat_map(|p| [p[0] + 0.3, p[1] - 0.4]).collect();
    let mut w = 0.0;
    unsafe {
        assert_eq!(bg_w2_exact(a.as_ptr(), 50, b.as_ptr(), 50, 2, 50, 1, &mut w), BgStatus::Ok);
    }
    assert!((w - 0.5).abs() < 1e-12, "{w}");
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/boltzgen.h")).unwrap();
    for name in ["bg_last_error", "bg_flow_load", "bg_flow_log_prob", "bg_flow_sample", "bg_potential_energy", "bg_w2_exact", "typedef struct BgFlow BgFlow"] {
        assert!(header.contains(name), "{name}");
    }
}

#[test]
fn c_program_links_against_static_library() {
    let deps = std::env::current_exe().unwrap().parent().unwrap().to_path_buf();
    let lib_dir = deps.parent().unwrap();
    if !lib_dir.join("libboltzgen_ffi.a").exists() {
        panic!("static library not found in {}", lib_dir.display());
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include <string.h>
#include "boltzgen.h"

int main(void) {
    BgPotential *p = NULL;
    if (bg_potential_from_toml("kind = \"double_well\"\ndomain = { lower = [-3.0, -3.0], upper = [3.0, 3.0] }", &p) != BG_STATUS_OK) return 1;
    double x[2] = {1.0, 0.0}, e = -1.0;
    if (bg_potential_energy(p, x, &e) != BG_STATUS_OK) return 2;
    bg_potential_free(p);
    BgFlow *f = NULL;
    if (bg_flow_load("/nonexistent.json", &f) != BG_STATUS_IO) return 3;
    if (bg_last_error() == NULL || strlen(bg_last_error()) == 0) return 4;
    printf("%.6f\n", e);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("main");
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(lib_dir.join("libboltzgen_ffi.a"))
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    let e: f64 = String::from_utf8_lossy(&out.stdout).trim().parse().unwrap();
    assert!(e.is_finite());
}
