//! Content-addressed blob files and in-progress upload chunks.

use std::fs::{self, File};
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::store::{sync_dir, write_atomic};

pub struct BlobStore {
    blobs: PathBuf,
    uploads: PathBuf,
    tmp: PathBuf,
}

/// Result of streaming an upload's chunks into a temporary file.
pub struct Assembled {
    pub tmp_path: PathBuf,
    pub content_hash: String,
    pub size_bytes: u64,
}

impl BlobStore {
    pub fn open(root: &Path) -> io::Result<Self> {
        let store = Self {
            blobs: root.join("blobs"),
            uploads: root.join("uploads"),
            tmp: root.join("tmp"),
        };
        fs::create_dir_all(&store.blobs)?;
        fs::create_dir_all(&store.uploads)?;
        // Anything in tmp belongs to an assembly that never finished.
        let _ = fs::remove_dir_all(&store.tmp);
        fs::create_dir_all(&store.tmp)?;
        Ok(store)
    }

    pub fn blob_path(&self, content_hash: &str) -> PathBuf {
        self.blobs.join(&content_hash[..2]).join(content_hash)
    }

    pub fn has_blob(&self, content_hash: &str) -> bool {
        self.blob_path(content_hash).is_file()
    }

    fn chunk_path(&self, upload_id: &str, index: u64) -> PathBuf {
        self.uploads.join(upload_id).join(format!("{index:08}.part"))
    }

    pub fn write_chunk(&self, upload_id: &str, index: u64, bytes: &[u8]) -> io::Result<()> {
        write_atomic(&self.chunk_path(upload_id, index), bytes)
    }

    pub fn has_chunk(&self, upload_id: &str, index: u64) -> bool {
        self.chunk_path(upload_id, index).is_file()
    }

    /// Concatenates chunks `0..count` into a temp file while hashing.
    pub fn assemble(&self, upload_id: &str, count: u64) -> io::Result<Assembled> {
        let tmp_path = self.tmp.join(format!("{upload_id}.assembling"));
        let mut out = BufWriter::new(File::create(&tmp_path)?);
        let mut hasher = Sha256::new();
        let mut size = 0u64;
        let mut buf = vec![0u8; 256 * 1024];
        for index in 0..count {
            let mut chunk = File::open(self.chunk_path(upload_id, index))?;
            loop {
                let n = chunk.read(&mut buf)?;
                if n == 0 {
                    break;
                }
                hasher.update(&buf[..n]);
                out.write_all(&buf[..n])?;
                size += n as u64;
            }
        }
        let file = out.into_inner().map_err(|e| e.into_error())?;
        file.sync_all()?;
        Ok(Assembled {
            tmp_path,
            content_hash: hex::encode(hasher.finalize()),
            size_bytes: size,
        })
    }

    /// Moves an assembled file into place under its hash. A blob that is
    /// already present is kept and the temp file discarded.
    pub fn promote(&self, assembled: &Assembled) -> io::Result<()> {
        let dest = self.blob_path(&assembled.content_hash);
        if dest.is_file() {
            fs::remove_file(&assembled.tmp_path)?;
            return Ok(());
        }
        let dir = dest.parent().expect("blob path has a parent");
        fs::create_dir_all(dir)?;
        fs::rename(&assembled.tmp_path, &dest)?;
        sync_dir(dir)
    }

    pub fn discard(&self, assembled: &Assembled) {
        let _ = fs::remove_file(&assembled.tmp_path);
    }

    pub fn remove_upload(&self, upload_id: &str) {
        let _ = fs::remove_dir_all(self.uploads.join(upload_id));
    }

    pub fn open_blob(&self, content_hash: &str) -> io::Result<File> {
        File::open(self.blob_path(content_hash))
    }
}
