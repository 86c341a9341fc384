//! C ABI for the binmrf library.
//!
//! Every constructor hands back an opaque handle that must be released
//! with the matching `_free` function; all other functions return a
//! `BmrfStatus` and write results through out-pointers. The most recent
//! error message is kept per thread and can be copied out with
//! `bmrf_last_error_message`.

use std::cell::RefCell;
use std::mem::ManuallyDrop;
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use binmrf::configsets::ConfigCatalog;
use binmrf::error::Error;
use binmrf::lattice::{Boundary, LatticeSpec, TemplateClique};
use binmrf::likelihood::{gibbs_sample, LikelihoodEngine};
use binmrf::model::{BinaryImage, EnergyEvaluator, ModelParams};
use binmrf::param::{beta_to_phi, conversion_table, independence_phi, ising_phi, phi_to_beta, BetaVector, PhiVector};
use binmrf::prior::{PartitionPrior, PriorConfig};
use binmrf::sampler::{Chain, SamplerConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BmrfStatus {
    Ok = 0,
    /// Invalid inputs: bad dimensions, constraints or parse failures.
    Validation = 2,
    /// A size cap was exceeded.
    Cap = 3,
    /// An I/O error occurred.
    Io = 4,
    /// A required pointer was null or a buffer too small.
    NullPointer = 5,
    /// A panic was caught at the boundary.
    Panic = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = msg.into());
}

fn status_of(err: &Error) -> BmrfStatus {
    match err {
        Error::Validation(_) | Error::Parse(_) => BmrfStatus::Validation,
        Error::Cap(_) => BmrfStatus::Cap,
        Error::Io(_) => BmrfStatus::Io,
    }
}

fn fail(err: Error) -> BmrfStatus {
    let status = status_of(&err);
    set_error(err.to_string());
    status
}

fn guard(body: impl FnOnce() -> BmrfStatus) -> BmrfStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => {
            set_error("panic caught at the FFI boundary");
            BmrfStatus::Panic
        }
    }
}

/// Copies the most recent error message of this thread into `buffer`
/// (NUL-terminated, truncated to `capacity`). Returns the full message
/// length in bytes, excluding the terminator.
///
/// # Safety
/// `buffer` must point to at least `capacity` writable bytes, or be null
/// (in which case only the length is returned).
#[no_mangle]
pub unsafe extern "C" fn bmrf_last_error_message(buffer: *mut c_char, capacity: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let msg = slot.borrow();
        let bytes = msg.as_bytes();
        if !buffer.is_null() && capacity > 0 {
            let n = bytes.len().min(capacity - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buffer as *mut u8, n);
            *buffer.add(n) = 0;
        }
        bytes.len()
    })
}

/// Opaque catalog of configuration classes for one template.
pub struct BmrfCatalog {
    inner: Arc<ConfigCatalog>,
}

/// Builds the catalog for a k-by-l block template.
///
/// # Safety
/// `out` must be a valid pointer; the handle must be released with
/// `bmrf_catalog_free`.
#[no_mangle]
pub unsafe extern "C" fn bmrf_catalog_new_block(
    k: usize,
    l: usize,
    out: *mut *mut BmrfCatalog,
) -> BmrfStatus {
    guard(|| {
        if out.is_null() {
            set_error("out pointer is null");
            return BmrfStatus::NullPointer;
        }
        let template = match TemplateClique::block(k, l) {
            Ok(t) => t,
            Err(e) => return fail(e),
        };
        match ConfigCatalog::build(template) {
            Ok(cat) => {
                *out = Box::into_raw(Box::new(BmrfCatalog {
                    inner: Arc::new(cat),
                }));
                BmrfStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `catalog` must come from `bmrf_catalog_new_block` and not already be
/// freed.
#[no_mangle]
pub unsafe extern "C" fn bmrf_catalog_free(catalog: *mut BmrfCatalog) {
    if !catalog.is_null() {
        drop(Box::from_raw(catalog));
    }
}

/// Number of configuration classes; 0 if the handle is null.
///
/// # Safety
/// `catalog` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn bmrf_catalog_class_count(catalog: *const BmrfCatalog) -> usize {
    if catalog.is_null() {
        return 0;
    }
    (*catalog).inner.class_count()
}

/// Multiplicity (number of template subsets) of one class.
///
/// # Safety
/// `catalog` must be a live handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bmrf_catalog_class_multiplicity(
    catalog: *const BmrfCatalog,
    class: usize,
    out: *mut usize,
) -> BmrfStatus {
    guard(|| {
        if catalog.is_null() || out.is_null() {
            set_error("null pointer");
            return BmrfStatus::NullPointer;
        }
        let cat = &(*catalog).inner;
        if class >= cat.class_count() {
            set_error(format!("class id {class} out of range"));
            return BmrfStatus::Validation;
        }
        *out = cat.classes()[class].multiplicity();
        BmrfStatus::Ok
    })
}

unsafe fn write_vector(values: &[f64], out: *mut f64, len: usize) -> BmrfStatus {
    if out.is_null() {
        set_error("output buffer is null");
        return BmrfStatus::NullPointer;
    }
    if len != values.len() {
        set_error(format!(
            "output buffer holds {len} values, expected {}",
            values.len()
        ));
        return BmrfStatus::NullPointer;
    }
    std::ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    BmrfStatus::Ok
}

/// Potential vector of the Ising embedding with interaction `omega`
/// (2x2 catalog only). `out` receives one value per class.
///
/// # Safety
/// `catalog` must be live; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn bmrf_ising_phi(
    catalog: *const BmrfCatalog,
    omega: f64,
    out: *mut f64,
    len: usize,
) -> BmrfStatus {
    guard(|| {
        if catalog.is_null() {
            set_error("catalog is null");
            return BmrfStatus::NullPointer;
        }
        match ising_phi(omega, &(*catalog).inner) {
            Ok(phi) => write_vector(&phi.values, out, len),
            Err(e) => fail(e),
        }
    })
}

/// Potential vector of the i.i.d. Bernoulli(p) embedding (2x2 catalog).
///
/// # Safety
/// As for `bmrf_ising_phi`.
#[no_mangle]
pub unsafe extern "C" fn bmrf_independence_phi(
    catalog: *const BmrfCatalog,
    p: f64,
    out: *mut f64,
    len: usize,
) -> BmrfStatus {
    guard(|| {
        if catalog.is_null() {
            set_error("catalog is null");
            return BmrfStatus::NullPointer;
        }
        match independence_phi(p, &(*catalog).inner) {
            Ok(phi) => write_vector(&phi.values, out, len),
            Err(e) => fail(e),
        }
    })
}

unsafe fn convert_direction(
    catalog: *const BmrfCatalog,
    n: usize,
    m: usize,
    input: *const f64,
    output: *mut f64,
    len: usize,
    phi_to_beta_dir: bool,
) -> BmrfStatus {
    if catalog.is_null() || input.is_null() {
        set_error("null pointer");
        return BmrfStatus::NullPointer;
    }
    let cat = &(*catalog).inner;
    if len != cat.class_count() {
        set_error(format!(
            "vector length {len} does not match the {} classes",
            cat.class_count()
        ));
        return BmrfStatus::NullPointer;
    }
    let values = std::slice::from_raw_parts(input, len).to_vec();
    let spec = match LatticeSpec::torus(n, m) {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    let table = match conversion_table(&spec, cat) {
        Ok(t) => t,
        Err(e) => return fail(e),
    };
    let result = if phi_to_beta_dir {
        phi_to_beta(&PhiVector { values }, cat, &table).map(|b| b.values)
    } else {
        beta_to_phi(&BetaVector { values }, cat, &table).map(|p| p.values)
    };
    match result {
        Ok(values) => write_vector(&values, output, len),
        Err(e) => fail(e),
    }
}

/// Converts a per-class potential vector to interaction coefficients on
/// an n-by-m torus.
///
/// # Safety
/// `input` and `output` must each hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn bmrf_phi_to_beta(
    catalog: *const BmrfCatalog,
    n: usize,
    m: usize,
    input: *const f64,
    output: *mut f64,
    len: usize,
) -> BmrfStatus {
    guard(|| convert_direction(catalog, n, m, input, output, len, true))
}

/// Converts interaction coefficients to the per-class potential vector.
///
/// # Safety
/// As for `bmrf_phi_to_beta`.
#[no_mangle]
pub unsafe extern "C" fn bmrf_beta_to_phi(
    catalog: *const BmrfCatalog,
    n: usize,
    m: usize,
    input: *const f64,
    output: *mut f64,
    len: usize,
) -> BmrfStatus {
    guard(|| convert_direction(catalog, n, m, input, output, len, false))
}

/// Boundary selector for C callers: 0 torus, 1 free.
fn boundary_of(value: u32) -> Result<Boundary, Error> {
    match value {
        0 => Ok(Boundary::Torus),
        1 => Ok(Boundary::Free),
        other => Err(Error::validation(format!(
            "boundary must be 0 (torus) or 1 (free), got {other}"
        ))),
    }
}

/// Simulates an image by systematic-scan Gibbs sampling and writes the
/// 0/1 sites row-major into `out_image`.
///
/// # Safety
/// `phi` must hold `phi_len` doubles and `out_image` n*m bytes.
#[no_mangle]
pub unsafe extern "C" fn bmrf_simulate(
    catalog: *const BmrfCatalog,
    n: usize,
    m: usize,
    boundary: u32,
    phi: *const f64,
    phi_len: usize,
    sweeps: usize,
    seed: u64,
    out_image: *mut u8,
) -> BmrfStatus {
    guard(|| {
        if catalog.is_null() || phi.is_null() || out_image.is_null() {
            set_error("null pointer");
            return BmrfStatus::NullPointer;
        }
        let cat = Arc::clone(&(*catalog).inner);
        if phi_len != cat.class_count() {
            set_error("phi length does not match the catalog");
            return BmrfStatus::NullPointer;
        }
        let boundary = match boundary_of(boundary) {
            Ok(b) => b,
            Err(e) => return fail(e),
        };
        let spec = match LatticeSpec::new(n, m, boundary) {
            Ok(s) => s,
            Err(e) => return fail(e),
        };
        let evaluator = match EnergyEvaluator::new(spec, cat) {
            Ok(ev) => ev,
            Err(e) => return fail(e),
        };
        let params = ModelParams::plain(PhiVector {
            values: std::slice::from_raw_parts(phi, phi_len).to_vec(),
        });
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = gibbs_sample(&evaluator, &params, sweeps, &mut rng);
        std::ptr::copy_nonoverlapping(image.data().as_ptr(), out_image, n * m);
        BmrfStatus::Ok
    })
}

/// Opaque posterior chain over partition states.
pub struct BmrfChain {
    chain: ManuallyDrop<Chain<'static>>,
    evaluator: *mut EnergyEvaluator,
    iteration: u64,
}

impl Drop for BmrfChain {
    fn drop(&mut self) {
        unsafe {
            // the chain borrows the leaked evaluator; drop it first
            ManuallyDrop::drop(&mut self.chain);
            drop(Box::from_raw(self.evaluator));
        }
    }
}

/// Engine selector: 0 brute force, 1 transfer matrix, 2 exchange,
/// 3 pseudo-likelihood, 4 prior-only.
fn engine_of(value: u32, exchange_sweeps: usize) -> Result<LikelihoodEngine, Error> {
    match value {
        0 => Ok(LikelihoodEngine::BruteForce),
        1 => Ok(LikelihoodEngine::Transfer),
        2 => Ok(LikelihoodEngine::Exchange {
            sweeps: exchange_sweeps.max(1),
        }),
        3 => Ok(LikelihoodEngine::PseudoLikelihood),
        4 => Ok(LikelihoodEngine::PriorOnly),
        other => Err(Error::validation(format!("unknown engine code {other}"))),
    }
}

/// Creates a posterior chain for an observed image. The image is `n*m`
/// row-major 0/1 bytes. Starts from the single-group state.
///
/// # Safety
/// Pointers must be valid; the handle must be released with
/// `bmrf_chain_free`.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn bmrf_chain_new(
    catalog: *const BmrfCatalog,
    n: usize,
    m: usize,
    boundary: u32,
    image: *const u8,
    engine: u32,
    exchange_sweeps: usize,
    gamma: f64,
    sigma_phi: f64,
    sigma: f64,
    seed: u64,
    tree_depth: usize,
    out: *mut *mut BmrfChain,
) -> BmrfStatus {
    guard(|| {
        if catalog.is_null() || image.is_null() || out.is_null() {
            set_error("null pointer");
            return BmrfStatus::NullPointer;
        }
        let cat = Arc::clone(&(*catalog).inner);
        let boundary = match boundary_of(boundary) {
            Ok(b) => b,
            Err(e) => return fail(e),
        };
        let spec = match LatticeSpec::new(n, m, boundary) {
            Ok(s) => s,
            Err(e) => return fail(e),
        };
        let data = std::slice::from_raw_parts(image, n * m).to_vec();
        let data = match BinaryImage::from_data(spec, data) {
            Ok(x) => x,
            Err(e) => return fail(e),
        };
        let engine = match engine_of(engine, exchange_sweeps) {
            Ok(e) => e,
            Err(e) => return fail(e),
        };
        let prior_cfg = match PriorConfig::new(gamma, sigma_phi, cat.class_count()) {
            Ok(c) => c,
            Err(e) => return fail(e),
        };
        let cfg = SamplerConfig {
            sigma,
            seed,
            tree_depth: tree_depth.max(1),
            iterations: 0,
            ..Default::default()
        };
        let evaluator = match EnergyEvaluator::new(spec, cat) {
            Ok(ev) => Box::into_raw(Box::new(ev)),
            Err(e) => return fail(e),
        };
        let chain = Chain::new(
            &*evaluator,
            data,
            None,
            engine,
            PartitionPrior::new(prior_cfg),
            cfg,
            None,
        );
        match chain {
            Ok(chain) => {
                *out = Box::into_raw(Box::new(BmrfChain {
                    chain: ManuallyDrop::new(chain),
                    evaluator,
                    iteration: 0,
                }));
                BmrfStatus::Ok
            }
            Err(e) => {
                drop(Box::from_raw(evaluator));
                fail(e)
            }
        }
    })
}

/// # Safety
/// `chain` must come from `bmrf_chain_new` and not already be freed.
#[no_mangle]
pub unsafe extern "C" fn bmrf_chain_free(chain: *mut BmrfChain) {
    if !chain.is_null() {
        drop(Box::from_raw(chain));
    }
}

/// Advances the chain by `iterations` full sweeps (one proposal of each
/// kernel per iteration), through the proposal tree when the chain was
/// created with tree_depth > 1.
///
/// # Safety
/// `chain` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn bmrf_chain_run(chain: *mut BmrfChain, iterations: u64) -> BmrfStatus {
    guard(|| {
        if chain.is_null() {
            set_error("chain is null");
            return BmrfStatus::NullPointer;
        }
        let handle = &mut *chain;
        for _ in 0..iterations {
            let result = if handle.chain.tree_depth() > 1 {
                handle.chain.run_tree_iteration(handle.iteration)
            } else {
                handle.chain.run_iteration(handle.iteration)
            };
            if let Err(e) = result {
                return fail(e);
            }
            handle.iteration += 1;
        }
        BmrfStatus::Ok
    })
}

/// Number of groups in the current state; 0 on a null handle.
///
/// # Safety
/// `chain` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn bmrf_chain_r(chain: *const BmrfChain) -> usize {
    if chain.is_null() {
        return 0;
    }
    (*chain).chain.state().0.r()
}

/// Copies the group index of every configuration class (length must be
/// the class count) and the group values (length must be at least the
/// current r; `values_written` receives r).
///
/// # Safety
/// Buffers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn bmrf_chain_state(
    chain: *const BmrfChain,
    class_to_group: *mut usize,
    class_len: usize,
    values: *mut f64,
    values_capacity: usize,
    values_written: *mut usize,
) -> BmrfStatus {
    guard(|| {
        if chain.is_null() || class_to_group.is_null() || values.is_null() || values_written.is_null() {
            set_error("null pointer");
            return BmrfStatus::NullPointer;
        }
        let (z, _) = (*chain).chain.state();
        if class_len != z.class_count() {
            set_error(format!(
                "class buffer holds {class_len}, expected {}",
                z.class_count()
            ));
            return BmrfStatus::NullPointer;
        }
        if values_capacity < z.r() {
            set_error(format!(
                "values buffer holds {values_capacity}, need {}",
                z.r()
            ));
            return BmrfStatus::NullPointer;
        }
        for class in 0..z.class_count() {
            *class_to_group.add(class) = z.group_of(class);
        }
        std::ptr::copy_nonoverlapping(z.values().as_ptr(), values, z.r());
        *values_written = z.r();
        BmrfStatus::Ok
    })
}

/// Acceptance rate of one kernel (0 value walk, 1 move, 2 split/merge).
///
/// # Safety
/// `chain` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bmrf_chain_acceptance_rate(
    chain: *const BmrfChain,
    kernel: usize,
    out: *mut f64,
) -> BmrfStatus {
    guard(|| {
        if chain.is_null() || out.is_null() {
            set_error("null pointer");
            return BmrfStatus::NullPointer;
        }
        let counters = (*chain).chain.counters();
        if kernel >= counters.len() {
            set_error(format!("kernel index {kernel} out of range"));
            return BmrfStatus::Validation;
        }
        *out = counters[kernel].rate();
        BmrfStatus::Ok
    })
}
