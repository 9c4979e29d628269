//! Read-only HTTP server over an exported bundle.
//!
//! Routes: `GET /manifest`, `GET /audio/<theta>/<class>.wav`,
//! `GET /maps/<kind>.bin` and `GET /` (UI assets, or a minimal index page
//! when no UI directory is given). Audio and map paths are resolved through
//! the manifest, never through the request path.

use std::fs;
use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;
use std::thread;

use anyhow::{Context, Result};
use tiny_http::{Header, Method, Request, Response, Server};

use hypsep::pipeline::BundleManifest;

const WORKERS: usize = 4;

const INDEX: &str = "<!doctype html><html><head><meta charset=\"utf-8\"><title>hypsep bundle</title></head>\
<body><h1>hypsep bundle</h1><ul><li><a href=\"/manifest\">/manifest</a></li>\
<li>/audio/&lt;theta&gt;/&lt;class&gt;.wav</li><li>/maps/&lt;kind&gt;.bin</li></ul></body></html>\n";

/// A routed response before it is written to the socket.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reply {
    pub status: u16,
    pub content_type: &'static str,
    pub body: Vec<u8>,
}

impl Reply {
    fn ok(content_type: &'static str, body: Vec<u8>) -> Self {
        Self {
            status: 200,
            content_type,
            body,
        }
    }

    fn error(status: u16, msg: &str) -> Self {
        Self {
            status,
            content_type: "text/plain; charset=utf-8",
            body: format!("{msg}\n").into_bytes(),
        }
    }
}

/// Bundle state shared by the workers.
#[derive(Debug)]
pub struct Site {
    root: PathBuf,
    manifest: BundleManifest,
    manifest_bytes: Vec<u8>,
    ui: Option<PathBuf>,
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).unwrap_or("") {
        "html" => "text/html; charset=utf-8",
        "js" | "mjs" => "text/javascript; charset=utf-8",
        "css" => "text/css; charset=utf-8",
        "json" => "application/json",
        "svg" => "image/svg+xml",
        "png" => "image/png",
        "ico" => "image/x-icon",
        "wasm" => "application/wasm",
        "wav" => "audio/wav",
        _ => "application/octet-stream",
    }
}

fn read(path: &Path, content_type: &'static str) -> Reply {
    match fs::read(path) {
        Ok(body) => Reply::ok(content_type, body),
        Err(_) => Reply::error(404, "not found"),
    }
}

impl Site {
    /// Loads and validates the bundle under `root`.
    pub fn open(root: &Path, ui: Option<&Path>) -> Result<Self> {
        let manifest = BundleManifest::load(root)?;
        let manifest_bytes = serde_json::to_vec(&manifest)?;
        let ui = match ui {
            Some(dir) => Some(
                dir.canonicalize()
                    .with_context(|| format!("UI directory {}", dir.display()))?,
            ),
            None => None,
        };
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            manifest_bytes,
            ui,
        })
    }

    /// Maps a request to a reply.
    pub fn route(&self, method: &str, url: &str) -> Reply {
        if method != "GET" && method != "HEAD" {
            return Reply::error(405, "method not allowed");
        }
        let path = url.split(['?', '#']).next().unwrap_or("");
        let segs: Vec<&str> = path.trim_start_matches('/').split('/').collect();
        match segs.as_slice() {
            ["manifest"] => Reply::ok("application/json", self.manifest_bytes.clone()),
            ["audio", "mixture.wav"] => read(&self.root.join(&self.manifest.mixture), "audio/wav"),
            ["audio", theta, file] => {
                let found = file
                    .strip_suffix(".wav")
                    .and_then(|class| self.manifest.audio.get(*theta)?.get(class));
                match found {
                    Some(rel) => read(&self.root.join(rel), "audio/wav"),
                    None => Reply::error(404, "no such audio"),
                }
            }
            ["maps", file] => {
                let found = file.strip_suffix(".bin").and_then(|kind| self.manifest.maps.get(kind));
                match found {
                    Some(d) => read(&self.root.join(&d.path), "application/octet-stream"),
                    None => Reply::error(404, "no such map"),
                }
            }
            _ => self.asset(path),
        }
    }

    fn asset(&self, path: &str) -> Reply {
        let Some(ui) = &self.ui else {
            return if path == "/" || path.is_empty() {
                Reply::ok("text/html; charset=utf-8", INDEX.as_bytes().to_vec())
            } else {
                Reply::error(404, "not found")
            };
        };
        let rel = path.trim_start_matches('/');
        let rel = if rel.is_empty() || rel.ends_with('/') {
            format!("{rel}index.html")
        } else {
            rel.to_string()
        };
        let rel = Path::new(&rel);
        if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
            return Reply::error(404, "not found");
        }
        match ui.join(rel).canonicalize() {
            Ok(full) if full.starts_with(ui) && full.is_file() => read(&full, content_type(&full)),
            _ => Reply::error(404, "not found"),
        }
    }
}

fn respond(site: &Site, req: Request) {
    let reply = site.route(req.method().as_str(), req.url());
    let head = *req.method() == Method::Head;
    let len = reply.body.len();
    let body = if head { Vec::new() } else { reply.body };
    let headers = [
        Header::from_bytes("Content-Type", reply.content_type).expect("static header"),
        Header::from_bytes("Access-Control-Allow-Origin", "*").expect("static header"),
        Header::from_bytes("Cache-Control", "no-cache").expect("static header"),
    ];
    let mut res = Response::from_data(body).with_status_code(reply.status);
    if head {
        res = res.with_header(Header::from_bytes("Content-Length", len.to_string()).expect("numeric header"));
    }
    for h in headers {
        res = res.with_header(h);
    }
    let _ = req.respond(res);
}

/// A running server; requests are handled on worker threads.
pub struct Running {
    pub addr: SocketAddr,
    server: Arc<Server>,
    workers: Vec<thread::JoinHandle<()>>,
}

impl Running {
    /// Stops accepting requests and joins the workers.
    pub fn shutdown(self) {
        self.server.unblock();
        for _ in 1..self.workers.len() {
            self.server.unblock();
        }
        for w in self.workers {
            let _ = w.join();
        }
    }

    /// Blocks until every worker exits.
    pub fn wait(self) {
        for w in self.workers {
            let _ = w.join();
        }
    }
}

/// Binds `addr` (port 0 picks a free one) and starts serving `site`.
pub fn start(site: Site, addr: &str) -> Result<Running> {
    let server = Arc::new(Server::http(addr).map_err(|e| anyhow::anyhow!("binding {addr}: {e}"))?);
    let addr = server
        .server_addr()
        .to_ip()
        .context("server is not bound to an IP address")?;
    let site = Arc::new(site);
    let workers = (0..WORKERS)
        .map(|_| {
            let server = Arc::clone(&server);
            let site = Arc::clone(&site);
            thread::spawn(move || {
                while let Ok(req) = server.recv() {
                    respond(&site, req);
                }
            })
        })
        .collect();
    Ok(Running { addr, server, workers })
}

pub fn serve(bundle: &Path, ui: Option<&Path>, host: &str, port: u16) -> Result<()> {
    let site = Site::open(bundle, ui)?;
    let running = start(site, &format!("{host}:{port}"))?;
    eprintln!("serving {} at http://{}/", bundle.display(), running.addr);
    running.wait();
    Ok(())
}
