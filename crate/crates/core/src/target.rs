//! Allocator targets and the calls the engine makes into them.

use std::ffi::{c_void, CStr};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use libloading::os::unix::{Library, Symbol, RTLD_LOCAL, RTLD_NOW};

use crate::error::TargetError;

/// The allocator interface the engine drives.
///
/// `allocate` returns 0 on failure. `usable_size` gets the request size that
/// was recorded at allocation time so shims without a size query can answer.
pub trait HeapTarget {
    fn id(&self) -> &str;
    fn allocate(&mut self, size: u64) -> u64;
    fn deallocate(&mut self, addr: u64);
    fn usable_size(&self, addr: u64, request: u64) -> u64;
    /// Whether `usable_size` asks the allocator rather than rounding the
    /// request.
    fn queries_usable_size(&self) -> bool {
        false
    }
}

/// Where an allocator comes from, as written on the command line.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum TargetSource {
    /// The process allocator (glibc on gnu targets).
    Native,
    /// A shared object loaded privately with `dlopen(RTLD_LOCAL)`.
    SharedObject(PathBuf),
    /// One of the reference allocators built alongside this crate.
    Bundled(String),
    /// A shared object that replaces the process allocator via `LD_PRELOAD`.
    Preload(PathBuf),
}

impl FromStr for TargetSource {
    type Err = TargetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "native" {
            return Ok(TargetSource::Native);
        }
        let bad = || TargetError::BadSpec(s.to_string());
        let (scheme, rest) = s.split_once(':').ok_or_else(bad)?;
        if rest.is_empty() {
            return Err(bad());
        }
        match scheme {
            "so" => Ok(TargetSource::SharedObject(rest.into())),
            "bundled" => {
                refalloc::shared_object(rest).ok_or_else(|| TargetError::UnknownBundled(rest.to_string()))?;
                Ok(TargetSource::Bundled(rest.to_string()))
            }
            "preload" => Ok(TargetSource::Preload(rest.into())),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for TargetSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetSource::Native => f.write_str("native"),
            TargetSource::SharedObject(p) => write!(f, "so:{}", p.display()),
            TargetSource::Bundled(n) => write!(f, "bundled:{n}"),
            TargetSource::Preload(p) => write!(f, "preload:{}", p.display()),
        }
    }
}

impl TargetSource {
    /// The shared object implementing this target, if any.
    pub fn object_path(&self) -> Option<PathBuf> {
        match self {
            TargetSource::Native => None,
            TargetSource::SharedObject(p) | TargetSource::Preload(p) => Some(p.clone()),
            TargetSource::Bundled(n) => refalloc::shared_object(n),
        }
    }

    /// Library to put in `LD_PRELOAD` for the worker process.
    pub fn preload(&self) -> Option<&Path> {
        match self {
            TargetSource::Preload(p) => Some(p),
            _ => None,
        }
    }

    /// Short name usable in file names.
    pub fn slug(&self) -> String {
        let raw = match self {
            TargetSource::Native => "native".to_string(),
            TargetSource::Bundled(n) => n.clone(),
            TargetSource::SharedObject(p) | TargetSource::Preload(p) => p
                .file_stem()
                .map(|s| s.to_string_lossy().trim_start_matches("lib").to_string())
                .unwrap_or_else(|| "so".to_string()),
        };
        raw.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '-' }).collect()
    }
}

type MallocFn = unsafe extern "C" fn(usize) -> *mut c_void;
type FreeFn = unsafe extern "C" fn(*mut c_void);
type UsableFn = unsafe extern "C" fn(*mut c_void) -> usize;

#[derive(Clone, Copy)]
enum UsableMode {
    Api(UsableFn),
    /// Reads the ptmalloc size word in front of the chunk. Unlike
    /// `malloc_usable_size` this never inspects the next chunk, so it stays
    /// safe on a corrupted heap.
    #[cfg_attr(not(target_env = "gnu"), allow(dead_code))]
    ChunkHeader,
    /// Request size rounded up to a word.
    Shim,
}

/// A loaded allocator.
pub struct AllocatorTarget {
    id: String,
    malloc: MallocFn,
    free: FreeFn,
    usable: UsableMode,
    _library: Option<Library>,
}

impl fmt::Debug for AllocatorTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AllocatorTarget").field("id", &self.id).finish_non_exhaustive()
    }
}

impl AllocatorTarget {
    pub fn load(source: &TargetSource) -> Result<Self, TargetError> {
        let id = source.to_string();
        match source {
            TargetSource::Native => Ok(Self::native(id)),
            TargetSource::SharedObject(path) => Self::open(id, path),
            TargetSource::Bundled(name) => {
                let path = refalloc::shared_object(name).ok_or_else(|| TargetError::UnknownBundled(name.clone()))?;
                Self::open(id, &path)
            }
            TargetSource::Preload(path) => Self::preloaded(id, path),
        }
    }

    fn native(id: String) -> Self {
        #[cfg(target_env = "gnu")]
        let usable = UsableMode::ChunkHeader;
        #[cfg(not(target_env = "gnu"))]
        let usable = UsableMode::Shim;
        AllocatorTarget { id, malloc: libc::malloc, free: libc::free, usable, _library: None }
    }

    fn open(id: String, path: &Path) -> Result<Self, TargetError> {
        let load = |source| TargetError::Load { path: path.to_path_buf(), source };
        // SAFETY: the library is an allocator; its initialisers are expected
        // to be benign.
        let library = unsafe { Library::open(Some(path), RTLD_NOW | RTLD_LOCAL) }.map_err(load)?;
        let missing = |symbol| TargetError::MissingSymbol { path: path.to_path_buf(), symbol };
        // SAFETY: symbol types follow the C allocator ABI.
        let (malloc, free, usable) = unsafe {
            let malloc: Symbol<MallocFn> = library.get(b"malloc\0").map_err(|_| missing("malloc"))?;
            let free: Symbol<FreeFn> = library.get(b"free\0").map_err(|_| missing("free"))?;
            let usable = library
                .get::<UsableFn>(b"malloc_usable_size\0")
                .map(|s| UsableMode::Api(*s))
                .unwrap_or(UsableMode::Shim);
            (*malloc, *free, usable)
        };
        Ok(AllocatorTarget { id, malloc, free, usable, _library: Some(library) })
    }

    fn preloaded(id: String, path: &Path) -> Result<Self, TargetError> {
        let wanted = path.canonicalize().unwrap_or_else(|_| path.to_path_buf());
        let malloc = lookup_global(c"malloc").ok_or(TargetError::MissingSymbol { path: path.into(), symbol: "malloc" })?;
        let free = lookup_global(c"free").ok_or(TargetError::MissingSymbol { path: path.into(), symbol: "free" })?;
        if defining_object(malloc).as_deref() != Some(wanted.as_path()) {
            return Err(TargetError::NotPreloaded(path.to_path_buf()));
        }
        let usable = lookup_global(c"malloc_usable_size")
            .filter(|sym| defining_object(*sym).as_deref() == Some(wanted.as_path()))
            // SAFETY: symbol resolved from the preloaded allocator.
            .map(|sym| UsableMode::Api(unsafe { std::mem::transmute::<*mut c_void, UsableFn>(sym) }))
            .unwrap_or(UsableMode::Shim);
        // SAFETY: same as above.
        let (malloc, free) = unsafe {
            (
                std::mem::transmute::<*mut c_void, MallocFn>(malloc),
                std::mem::transmute::<*mut c_void, FreeFn>(free),
            )
        };
        Ok(AllocatorTarget { id, malloc, free, usable, _library: None })
    }
}

fn lookup_global(name: &CStr) -> Option<*mut c_void> {
    // SAFETY: dlsym on the global namespace with a NUL-terminated name.
    let sym = unsafe { libc::dlsym(libc::RTLD_DEFAULT, name.as_ptr()) };
    (!sym.is_null()).then_some(sym)
}

fn defining_object(sym: *mut c_void) -> Option<PathBuf> {
    let mut info: libc::Dl_info = unsafe { std::mem::zeroed() };
    // SAFETY: dladdr only reads loader metadata.
    if unsafe { libc::dladdr(sym, &mut info) } == 0 || info.dli_fname.is_null() {
        return None;
    }
    // SAFETY: dli_fname is a NUL-terminated string owned by the loader.
    let name = unsafe { CStr::from_ptr(info.dli_fname) }.to_string_lossy().into_owned();
    let path = PathBuf::from(name);
    Some(path.canonicalize().unwrap_or(path))
}

impl HeapTarget for AllocatorTarget {
    fn id(&self) -> &str {
        &self.id
    }

    fn allocate(&mut self, size: u64) -> u64 {
        match usize::try_from(size) {
            // SAFETY: calling the target's malloc is the point of the exercise.
            Ok(n) => unsafe { (self.malloc)(n) as u64 },
            Err(_) => 0,
        }
    }

    fn deallocate(&mut self, addr: u64) {
        // SAFETY: may well be an invalid free; the engine runs in a sandbox.
        unsafe { (self.free)(addr as *mut c_void) }
    }

    fn queries_usable_size(&self) -> bool {
        !matches!(self.usable, UsableMode::Shim)
    }

    fn usable_size(&self, addr: u64, request: u64) -> u64 {
        if addr == 0 {
            return 0;
        }
        match self.usable {
            // SAFETY: addr came from this allocator.
            UsableMode::Api(f) => unsafe { f(addr as *mut c_void) as u64 },
            UsableMode::ChunkHeader => {
                // SAFETY: ptmalloc keeps the chunk size one word before the
                // user pointer.
                let size = unsafe { *((addr - 8) as *const u64) };
                const IS_MMAPPED: u64 = 2;
                if size & IS_MMAPPED != 0 {
                    (size & !7).saturating_sub(16)
                } else {
                    (size & !7).saturating_sub(8)
                }
            }
            UsableMode::Shim => (request + 7) & !7,
        }
    }
}
