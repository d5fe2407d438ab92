use std::path::Path;
use std::process::Command;

fn header() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include/cascadefer.h")
}

#[test]
fn header_declares_every_export() {
    let text = std::fs::read_to_string(header()).unwrap();
    for symbol in [
        "cf_last_error",
        "cf_version",
        "cf_string_free",
        "cf_config_default",
        "cf_config_from_toml",
        "cf_config_to_toml",
        "cf_config_model_stages",
        "cf_config_free",
        "cf_calibrator_fit",
        "cf_calibrator_apply",
        "cf_calibrator_params",
        "cf_calibrator_free",
        "cf_optimizer_new",
        "cf_optimizer_push",
        "cf_optimizer_update",
        "cf_optimizer_thresholds",
        "cf_optimizer_state_json",
        "cf_optimizer_free",
        "cf_run_reference_stream",
        "typedef struct CfConfig CfConfig",
        "CF_STATUS_BUFFER_TOO_SMALL = 7",
    ] {
        assert!(text.contains(symbol), "header lacks {symbol}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let dir = tempfile_dir();
    let src = dir.join("use_header.c");
    std::fs::write(
        &src,
        "#include \"cascadefer.h\"\n\
         int probe(void) {\n\
           CfConfig *cfg = NULL;\n\
           size_t n = 0;\n\
           if (cf_config_default(&cfg) != CF_STATUS_OK) return 1;\n\
           cf_config_model_stages(cfg, &n);\n\
           cf_config_free(cfg);\n\
           return (int)n;\n\
         }\n",
    )
    .unwrap();
    let status = Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header().parent().unwrap())
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| {
            Command::new(c)
                .arg("--version")
                .output()
                .is_ok_and(|o| o.status.success())
        })
        .ok_or(())
}

fn tempfile_dir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("cascadefer-ffi-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}
