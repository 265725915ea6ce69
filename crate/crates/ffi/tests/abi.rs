use std::ffi::{c_char, c_void, CStr, CString};
use std::ptr;
use std::sync::atomic::{AtomicUsize, Ordering};

use mxrun_ffi::*;

const MATRIX: &str = r#"
exclude = [{ dataset = "digits", feature_engineering = "simple" }]

[parameters]
dataset = ["digits", "wine", "breast_cancer"]
feature_engineering = ["dummy", "simple"]
preprocessing = ["dummy", "minmax", "standard"]
model = ["adaboost", "random_forest", "svc"]

[settings]
n_fold = 5
"#;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = mx_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

unsafe fn parse(src: &str) -> *mut MxConfig {
    let mut config = ptr::null_mut();
    assert_eq!(mx_config_parse(cstr(src).as_ptr(), &mut config), MxStatus::Ok);
    config
}

unsafe fn plan_of(src: &str) -> *mut MxPlan {
    let config = parse(src);
    let mut plan = ptr::null_mut();
    assert_eq!(mx_plan_expand(config, &mut plan), MxStatus::Ok);
    mx_config_free(config);
    plan
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(mx_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn parse_expand_and_keys() {
    unsafe {
        let plan = plan_of(MATRIX);
        assert_eq!(mx_plan_len(plan), 45);
        assert_eq!(mx_plan_excluded(plan), 9);

        let mut key = [0 as c_char; 65];
        assert_eq!(mx_plan_task_key(plan, 0, key.as_mut_ptr()), MxStatus::Ok);
        let hex = CStr::from_ptr(key.as_ptr()).to_str().unwrap().to_owned();
        assert_eq!(hex.len(), 64);

        let config = mxrun::config::parse_config(MATRIX, mxrun::config::ConfigFormat::Toml).unwrap();
        let native = mxrun::expand(&config).unwrap();
        assert_eq!(hex, native.tasks[0].key.to_hex());

        assert_eq!(mx_plan_task_key(plan, 45, key.as_mut_ptr()), MxStatus::OutOfRange);
        assert!(last_error().contains("45"));

        let mut fp = [0 as c_char; 65];
        assert_eq!(mx_plan_fingerprint(plan, fp.as_mut_ptr()), MxStatus::Ok);
        assert_eq!(
            CStr::from_ptr(fp.as_ptr()).to_str().unwrap(),
            native.config_fingerprint.to_hex()
        );
        mx_plan_free(plan);
    }
}

#[test]
fn errors_carry_messages() {
    unsafe {
        let mut config = ptr::null_mut();
        assert_eq!(
            mx_config_parse(cstr("parameters = [").as_ptr(), &mut config),
            MxStatus::Config
        );
        assert!(config.is_null());
        assert!(last_error().contains("line 1"));

        assert_eq!(mx_config_parse(ptr::null(), &mut config), MxStatus::NullArgument);
        assert_eq!(
            mx_config_parse(cstr("x = 1").as_ptr(), ptr::null_mut()),
            MxStatus::NullArgument
        );

        let bad = parse("exclude = [{ datasett = \"a\" }]\n[parameters]\ndataset = [\"a\", \"a\"]\n");
        let (mut errors, mut warnings) = (0usize, 0usize);
        assert_eq!(mx_config_validate(bad, &mut errors, &mut warnings), MxStatus::Config);
        assert_eq!(errors, 2);
        let msg = last_error();
        assert!(msg.contains("E003") && msg.contains("E011"), "{msg}");
        mx_config_free(bad);

        let good = parse(MATRIX);
        assert_eq!(mx_config_validate(good, &mut errors, ptr::null_mut()), MxStatus::Ok);
        assert_eq!(errors, 0);
        assert!(mx_last_error_message().is_null());
        mx_config_free(good);

        mx_config_free(ptr::null_mut());
        mx_plan_free(ptr::null_mut());
        mx_report_free(ptr::null_mut());
        assert_eq!(mx_plan_len(ptr::null()), 0);
    }
}

#[test]
fn command_run_and_restore() {
    let tmp = tempfile::tempdir().unwrap();
    let cache = cstr(tmp.path().to_str().unwrap());
    unsafe {
        let plan = plan_of("[parameters]\nx = [1, 2, 3]\n[settings]\ntag = \"t\"\n");
        let mut opts = mx_run_options_default();
        opts.jobs = 2;
        let cmd = cstr("test {x} != 2 && printf '%s-%s' {x} {tag}");
        let mut report = ptr::null_mut();
        assert_eq!(
            mx_run_command(plan, cmd.as_ptr(), cache.as_ptr(), &opts, &mut report),
            MxStatus::Ok
        );

        let mut counts = MxCounts::default();
        assert_eq!(mx_report_counts(report, &mut counts), MxStatus::Ok);
        assert_eq!(
            (counts.total, counts.succeeded, counts.failed, counts.executed),
            (3, 2, 1, 3)
        );

        let mut status = MxTaskStatus::Restored;
        assert_eq!(mx_report_task_status(report, 1, &mut status), MxStatus::Ok);
        assert_eq!(status, MxTaskStatus::Failed);

        let (mut data, mut len) = (ptr::null(), 0usize);
        assert_eq!(mx_report_payload(report, 2, &mut data, &mut len), MxStatus::Ok);
        assert_eq!(std::slice::from_raw_parts(data, len), b"3-t");
        mx_report_free(report);

        let mut again = ptr::null_mut();
        assert_eq!(
            mx_run_command(plan, cmd.as_ptr(), cache.as_ptr(), ptr::null(), &mut again),
            MxStatus::Ok
        );
        assert_eq!(mx_report_counts(again, &mut counts), MxStatus::Ok);
        assert_eq!((counts.restored, counts.executed), (2, 1));
        mx_report_free(again);

        let mut none = ptr::null_mut();
        assert_eq!(
            mx_run_command(
                plan,
                cstr("echo {nope}").as_ptr(),
                cache.as_ptr(),
                ptr::null(),
                &mut none
            ),
            MxStatus::Run
        );
        assert!(last_error().contains("nope"));
        mx_plan_free(plan);
    }
}

struct Seen {
    calls: AtomicUsize,
}

unsafe extern "C" fn body(user_data: *mut c_void, task: *const MxTask, payload: *mut MxBuffer) -> i32 {
    let seen = &*(user_data as *const Seen);
    seen.calls.fetch_add(1, Ordering::SeqCst);

    let mut needed = 0usize;
    assert_eq!(
        mx_task_get(task, c"x".as_ptr(), ptr::null_mut(), 0, &mut needed),
        MxStatus::BufferTooSmall
    );
    let mut buf = vec![0 as c_char; needed];
    assert_eq!(
        mx_task_get(task, c"x".as_ptr(), buf.as_mut_ptr(), needed, &mut needed),
        MxStatus::Ok
    );
    let x = CStr::from_ptr(buf.as_ptr()).to_str().unwrap().to_owned();

    let mut key = [0 as c_char; 65];
    assert_eq!(mx_task_key(task, key.as_mut_ptr()), MxStatus::Ok);

    if x == "b" {
        return 7;
    }
    let text = format!("{x}:{}", CStr::from_ptr(key.as_ptr()).to_str().unwrap());
    mx_buffer_write(payload, text.as_ptr(), text.len()) as i32
}

#[test]
fn callback_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cache = cstr(tmp.path().to_str().unwrap());
    let seen = Seen {
        calls: AtomicUsize::new(0),
    };
    unsafe {
        let plan = plan_of("[parameters]\nx = [\"a\", \"b\", \"c\"]\n");
        let mut report = ptr::null_mut();
        let status = mx_run_callback(
            plan,
            Some(body),
            &seen as *const Seen as *mut c_void,
            cache.as_ptr(),
            ptr::null(),
            &mut report,
        );
        assert_eq!(status, MxStatus::Ok);
        assert_eq!(seen.calls.load(Ordering::SeqCst), 3);

        let mut counts = MxCounts::default();
        mx_report_counts(report, &mut counts);
        assert_eq!((counts.succeeded, counts.failed), (2, 1));

        let mut key = [0 as c_char; 65];
        mx_plan_task_key(plan, 0, key.as_mut_ptr());
        let (mut data, mut len) = (ptr::null(), 0usize);
        mx_report_payload(report, 0, &mut data, &mut len);
        let expected = format!("a:{}", CStr::from_ptr(key.as_ptr()).to_str().unwrap());
        assert_eq!(std::slice::from_raw_parts(data, len), expected.as_bytes());

        mx_report_payload(report, 1, &mut data, &mut len);
        assert!(data.is_null() && len == 0);
        mx_report_free(report);

        let mut none = ptr::null_mut();
        assert_eq!(
            mx_run_callback(plan, None, ptr::null_mut(), cache.as_ptr(), ptr::null(), &mut none),
            MxStatus::NullArgument
        );
        mx_plan_free(plan);
    }
}
