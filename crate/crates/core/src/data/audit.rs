use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditEvent {
    Phase(String),
    Read(PathBuf),
}

/// Shared, append-only record of every image or mask file the loaders open.
#[derive(Debug, Clone, Default)]
pub struct AuditLog {
    events: Arc<Mutex<Vec<AuditEvent>>>,
}

impl AuditLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn phase(&self, name: impl Into<String>) {
        self.push(AuditEvent::Phase(name.into()));
    }

    pub fn record_read(&self, path: &Path) {
        self.push(AuditEvent::Read(path.to_path_buf()));
    }

    fn push(&self, e: AuditEvent) {
        self.events.lock().expect("audit lock poisoned").push(e);
    }

    pub fn events(&self) -> Vec<AuditEvent> {
        self.events.lock().expect("audit lock poisoned").clone()
    }

    /// Files read before the first occurrence of `phase` (all reads if it never happened).
    pub fn reads_before(&self, phase: &str) -> Vec<PathBuf> {
        self.events()
            .into_iter()
            .take_while(|e| !matches!(e, AuditEvent::Phase(p) if p == phase))
            .filter_map(|e| match e {
                AuditEvent::Read(p) => Some(p),
                AuditEvent::Phase(_) => None,
            })
            .collect()
    }

    pub fn reads(&self) -> Vec<PathBuf> {
        self.reads_before("\0never")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_are_split_by_phase() {
        let log = AuditLog::new();
        log.record_read(Path::new("a"));
        log.phase("eval");
        log.record_read(Path::new("b"));
        assert_eq!(log.reads_before("eval"), vec![PathBuf::from("a")]);
        assert_eq!(log.reads().len(), 2);
        assert_eq!(log.reads_before("missing").len(), 2);
    }
}
