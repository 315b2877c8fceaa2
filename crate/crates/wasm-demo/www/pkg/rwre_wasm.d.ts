/* tslint:disable */
/* eslint-disable */

/**
 * Calibrates a gaussian-binary template N(mu, s2) to the boundary case.
 */
export function calibrate(mu: number, s2: number): string;

/**
 * Exact quenched summary of generation `generation` on a frozen depth-`depth` tree.
 */
export function quenched(depth: number, generation: number, n: number, seed: number): string;

/**
 * One walk on a fresh reference tree; returns the first-visit histogram.
 */
export function walk(n: number, excursions: boolean, seed: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly calibrate: (a: number, b: number) => [number, number];
    readonly quenched: (a: number, b: number, c: number, d: number) => [number, number];
    readonly walk: (a: number, b: number, c: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
