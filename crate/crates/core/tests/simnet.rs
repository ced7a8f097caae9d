//! The simulator's generated schedules against what the algorithms actually
//! send.

use hiercoll::harness::same_steps;
use hiercoll::simnet::schedule::steps_from_log;
use hiercoll::simnet::{build_schedule, simulate, time_log, PhysTopology, SimConfig};
use hiercoll::transport::inprocess::InProcessWorld;
use hiercoll::transport::simulated::SimulatedWorld;
use hiercoll::{Algorithm, CollectiveKind, InterAlgorithm, Topology};

const ALGORITHMS: [Algorithm; 4] = [
    Algorithm::RING,
    Algorithm::RECURSIVE,
    Algorithm::Hierarchical(InterAlgorithm::Ring),
    Algorithm::Hierarchical(InterAlgorithm::Recursive),
];

fn input_len(collective: CollectiveKind, m_bytes: u64, p: usize) -> usize {
    let elems = (m_bytes / 4) as usize;
    match collective {
        CollectiveKind::AllGather => elems / p,
        CollectiveKind::ReduceScatter => elems,
    }
}

#[test]
fn schedules_match_in_process_logs() {
    for (n, m) in [(1, 4), (2, 2), (2, 4), (4, 2), (8, 1), (4, 4)] {
        let topo = Topology::new(n, m, 1).unwrap();
        let p = topo.world_size();
        let cfg = SimConfig::new(topo);
        for collective in [CollectiveKind::AllGather, CollectiveKind::ReduceScatter] {
            for alg in ALGORITHMS {
                let m_bytes = 4 * 3 * p as u64;
                let len = input_len(collective, m_bytes, p);
                let world = InProcessWorld::new(p).with_log();
                world.run(|comm| alg.execute(topo, collective, comm, &vec![1.0; len]).unwrap());
                let logged = steps_from_log(&world.log(), collective).unwrap();
                let planned = build_schedule(&cfg, collective, alg, m_bytes).unwrap().steps();
                assert!(same_steps(&logged, &planned), "{collective} {alg} {topo}");
            }
        }
    }
}

#[test]
fn timing_a_log_equals_simulating_the_schedule() {
    let topo = Topology::new(4, 4, 2).unwrap();
    let cfg = SimConfig::new(topo).with_phys(PhysTopology::RingOfNodes);
    let p = topo.world_size();
    for collective in [CollectiveKind::AllGather, CollectiveKind::ReduceScatter] {
        for alg in ALGORITHMS {
            let m_bytes = 4 * 8 * p as u64;
            let len = input_len(collective, m_bytes, p);
            let world = SimulatedWorld::new(p);
            world.run(|comm| alg.execute(topo, collective, comm, &vec![2.0; len]).unwrap());
            let from_log = time_log(&cfg, &world.log(), collective).unwrap();
            let direct = simulate(&cfg, collective, alg, m_bytes).unwrap();
            assert_eq!(from_log.seconds, direct.seconds, "{collective} {alg}");
            assert_eq!(from_log.counters, direct.counters);
        }
    }
}
