//! Ring allreduce (reduce-scatter then allgather) over an abstract transport,
//! plus the scalar allgather used to exchange per-epoch timing statistics.

use thiserror::Error;

use crate::domain::GradientBuffer;
use crate::transport::{mem_ring, Counters, Frame, MsgType, RingTransport, TransportError};

#[derive(Debug, Error)]
pub enum CollectiveError {
    #[error("received chunk of {got} values where {expected} were expected")]
    LengthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("unexpected {0:?} frame during collective")]
    UnexpectedFrame(MsgType),
}

/// A rank's place on the ring.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RingPosition {
    pub rank: usize,
    pub n: usize,
}

impl RingPosition {
    pub fn new(rank: usize, n: usize) -> RingPosition {
        assert!(n >= 2);
        assert!(rank < n);
        RingPosition { rank, n }
    }

    pub fn prev(&self) -> usize {
        (self.rank + self.n - 1) % self.n
    }

    pub fn next(&self) -> usize {
        (self.rank + 1) % self.n
    }
}

/// Chunk `c` of a length-`len` vector split `n` ways:
/// `[floor(c*len/n), floor((c+1)*len/n))`. Every rank computes the same
/// boundaries without negotiation; chunks may be empty when `len < n`.
pub fn chunk_range(len: usize, n: usize, c: usize) -> std::ops::Range<usize> {
    (c * len / n)..((c + 1) * len / n)
}

/// Blocking ring allreduce: every participant returns the element-wise sum
/// of all `n` inputs, with `sample_count` summed too. `n-1` reduce-scatter
/// steps followed by `n-1` allgather steps, each moving one chunk to the
/// next rank.
pub fn ring_allreduce<T: RingTransport>(
    local: &GradientBuffer,
    pos: RingPosition,
    transport: &mut T,
) -> Result<GradientBuffer, CollectiveError> {
    let n = pos.n;
    let len = local.values.len();
    let mut values = local.values.clone();

    // Reduce-scatter: after step s, the chunk received at step s holds s+2
    // contributions; after n-1 steps rank r owns the full sum of chunk r+1.
    for step in 0..n - 1 {
        let send_chunk = (pos.rank + n - step) % n;
        let recv_chunk = (pos.rank + n - step - 1) % n;
        transport.send_next(Frame::chunk(
            pos.rank as u32,
            &values[chunk_range(len, n, send_chunk)],
        ))?;
        let incoming = recv_chunk_frame(transport)?;
        let dst = chunk_range(len, n, recv_chunk);
        if incoming.len() != dst.len() {
            return Err(CollectiveError::LengthMismatch {
                expected: dst.len(),
                got: incoming.len(),
            });
        }
        for (v, x) in values[dst].iter_mut().zip(&incoming) {
            *v += x;
        }
    }

    // Allgather: circulate the completed chunks around the ring.
    for step in 0..n - 1 {
        let send_chunk = (pos.rank + n + 1 - step) % n;
        let recv_chunk = (pos.rank + n - step) % n;
        transport.send_next(Frame::chunk(
            pos.rank as u32,
            &values[chunk_range(len, n, send_chunk)],
        ))?;
        let incoming = recv_chunk_frame(transport)?;
        let dst = chunk_range(len, n, recv_chunk);
        if incoming.len() != dst.len() {
            return Err(CollectiveError::LengthMismatch {
                expected: dst.len(),
                got: incoming.len(),
            });
        }
        values[dst].copy_from_slice(&incoming);
    }

    let counts = allgather_scalar(local.sample_count as f64, pos, transport)?;
    Ok(GradientBuffer {
        values,
        sample_count: counts.iter().map(|&c| c as u64).sum(),
    })
}

fn recv_chunk_frame<T: RingTransport>(transport: &mut T) -> Result<Vec<f64>, CollectiveError> {
    let frame = transport.recv_prev()?;
    if frame.msg_type != MsgType::Chunk {
        return Err(CollectiveError::UnexpectedFrame(frame.msg_type));
    }
    Ok(frame.floats()?)
}

/// Ring allgather of one scalar per rank: every participant returns the full
/// vector `[x_0 .. x_{n-1}]` indexed by rank. Each frame carries the
/// originating rank so values land in the right slot.
pub fn allgather_scalar<T: RingTransport>(
    local: f64,
    pos: RingPosition,
    transport: &mut T,
) -> Result<Vec<f64>, CollectiveError> {
    let n = pos.n;
    let mut out = vec![0.0; n];
    out[pos.rank] = local;
    let mut origin = pos.rank;
    let mut value = local;
    for _ in 0..n - 1 {
        transport.send_next(Frame::scalar(origin as u32, &[value]))?;
        let frame = transport.recv_prev()?;
        if frame.msg_type != MsgType::Scalar {
            return Err(CollectiveError::UnexpectedFrame(frame.msg_type));
        }
        let vals = frame.floats()?;
        if vals.len() != 1 {
            return Err(CollectiveError::LengthMismatch {
                expected: 1,
                got: vals.len(),
            });
        }
        origin = frame.sender_rank as usize;
        value = vals[0];
        out[origin] = value;
    }
    Ok(out)
}

/// Drive all `n` participants of a ring allreduce over the in-memory
/// transport, one thread per rank. Returns every rank's result plus the
/// per-rank transport counters.
pub fn ring_allreduce_all(
    inputs: &[GradientBuffer],
) -> Result<(Vec<GradientBuffer>, Vec<std::sync::Arc<Counters>>), CollectiveError> {
    let n = inputs.len();
    let (endpoints, counters) = mem_ring(n);
    let results = std::thread::scope(|scope| {
        let handles: Vec<_> = endpoints
            .into_iter()
            .enumerate()
            .map(|(rank, mut ep)| {
                let local = &inputs[rank];
                scope.spawn(move || ring_allreduce(local, RingPosition::new(rank, n), &mut ep))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("collective worker panicked"))
            .collect::<Result<Vec<_>, _>>()
    })?;
    Ok((results, counters))
}

/// Drive a full scalar allgather over the in-memory transport.
pub fn allgather_scalar_all(locals: &[f64]) -> Result<Vec<Vec<f64>>, CollectiveError> {
    let n = locals.len();
    let (endpoints, _) = mem_ring(n);
    std::thread::scope(|scope| {
        let handles: Vec<_> = endpoints
            .into_iter()
            .enumerate()
            .map(|(rank, mut ep)| {
                let local = locals[rank];
                scope.spawn(move || allgather_scalar(local, RingPosition::new(rank, n), &mut ep))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("collective worker panicked"))
            .collect::<Result<Vec<_>, _>>()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::Ordering;

    fn buf(values: &[f64]) -> GradientBuffer {
        GradientBuffer {
            values: values.to_vec(),
            sample_count: 1,
        }
    }

    #[test]
    fn two_ranks_sum() {
        let (results, _) = ring_allreduce_all(&[buf(&[1.0, 2.0]), buf(&[3.0, 4.0])]).unwrap();
        for r in &results {
            assert_eq!(r.values, vec![4.0, 6.0]);
            assert_eq!(r.sample_count, 2);
        }
    }

    #[test]
    fn three_ranks_disjoint_support() {
        let inputs = [buf(&[1.0, 0.0, 0.0]), buf(&[0.0, 2.0, 0.0]), buf(&[0.0, 0.0, 3.0])];
        let (results, _) = ring_allreduce_all(&inputs).unwrap();
        for r in &results {
            assert_eq!(r.values, vec![1.0, 2.0, 3.0]);
        }
    }

    #[test]
    fn matches_direct_sum_and_send_counts() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for n in 2..=8 {
            for len in [1usize, 7, n, n + 1, 1000] {
                let inputs: Vec<GradientBuffer> = (0..n)
                    .map(|_| GradientBuffer {
                        values: (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                        sample_count: rng.gen_range(1..50),
                    })
                    .collect();
                let mut expect = vec![0.0; len];
                for b in &inputs {
                    for (e, v) in expect.iter_mut().zip(&b.values) {
                        *e += v;
                    }
                }
                let count_sum: u64 = inputs.iter().map(|b| b.sample_count).sum();
                let (results, counters) = ring_allreduce_all(&inputs).unwrap();
                for r in &results {
                    assert_eq!(r.sample_count, count_sum);
                    for (a, e) in r.values.iter().zip(&expect) {
                        let tol = 1e-9 * e.abs().max(1.0);
                        assert!((a - e).abs() <= tol, "n={n} len={len}: {a} vs {e}");
                    }
                }
                for c in &counters {
                    assert_eq!(
                        c.chunks_sent.load(Ordering::Relaxed),
                        2 * (n as u64 - 1),
                        "n={n} len={len}"
                    );
                }
            }
        }
    }

    #[test]
    fn allgather_matches_central_gather() {
        for n in [2usize, 3, 5] {
            let locals: Vec<f64> = (0..n).map(|r| r as f64).collect();
            let results = allgather_scalar_all(&locals).unwrap();
            for r in results {
                assert_eq!(r, locals);
            }
        }
        let results = allgather_scalar_all(&[1.0, 2.0, 5.0]).unwrap();
        for r in results {
            assert_eq!(r, vec![1.0, 2.0, 5.0]);
        }
    }

    #[test]
    fn chunking_tiles_the_vector() {
        for len in [0usize, 1, 3, 7, 16, 1000] {
            for n in 2..=9 {
                let mut covered = 0;
                for c in 0..n {
                    let r = chunk_range(len, n, c);
                    assert_eq!(r.start, covered, "len={len} n={n} c={c}");
                    covered = r.end;
                }
                assert_eq!(covered, len);
            }
        }
    }

    #[test]
    fn length_mismatch_detected() {
        // Rank 1 runs the collective with a longer buffer than rank 0;
        // the chunk boundaries disagree and the mismatch must surface.
        let (mut endpoints, _) = mem_ring(2);
        let ep1 = endpoints.pop().unwrap();
        let ep0 = endpoints.pop().unwrap();
        let short = buf(&[1.0, 2.0]);
        let long = buf(&[1.0, 2.0, 3.0, 4.0]);
        let errs = std::thread::scope(|scope| {
            let h0 = scope.spawn(move || {
                let mut ep = ep0;
                ring_allreduce(&short, RingPosition::new(0, 2), &mut ep)
            });
            let h1 = scope.spawn(move || {
                let mut ep = ep1;
                ring_allreduce(&long, RingPosition::new(1, 2), &mut ep)
            });
            [h0.join().unwrap(), h1.join().unwrap()]
        });
        assert!(errs.iter().any(|r| matches!(
            r,
            Err(CollectiveError::LengthMismatch { .. }) | Err(CollectiveError::Transport(_))
        )));
    }
}
